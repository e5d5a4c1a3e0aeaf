"""Teacher-to-student layer mappings.

A mapping assigns to each student encoder layer ``i`` (1-based) an ordered
list of teacher layer indices whose hidden states are fused and used as that
layer's distillation target.

Variant rules for sizes other than the published (6, 2) instance:

* ``RC``  contiguous partition of ``1..n_t`` into ``n_s`` blocks, larger first.
* ``OC``  windows of width ``min(2 * ceil(n_t / (n_s + 1)), n_t)``, evenly
  spaced from the first to the last teacher layer.
* ``SC``  windows of width ``floor(n_t / (n_s + 1))`` anchored at both ends,
  interior windows evenly spaced; the gaps are skipped layers.
* ``CC``  each RC block thinned to every other index, starting at its first.
  The 5-teacher / 2-student case is pinned to ``{1,3,5}, {2,4}``.
* ``PKD`` singleton ``{floor(i * n_t / n_s)}``.
"""
from __future__ import annotations

import math
from dataclasses import dataclass, field

from .errors import ConfigError

VARIANTS = ("RC", "OC", "SC", "CC", "PKD")

# Published instance that no single simple rule reproduces together with (6, 2).
_CC_PINNED = {(5, 2): ((1, 3, 5), (2, 4))}


@dataclass(frozen=True)
class LayerMapping:
    entries: tuple[tuple[int, ...], ...]
    n_teacher: int
    n_student: int
    variant: str | None = None

    def __post_init__(self):
        object.__setattr__(self, "entries", tuple(tuple(int(j) for j in e) for e in self.entries))

    def __getitem__(self, i: int) -> tuple[int, ...]:
        """``M(i)`` for a 1-based student layer index."""
        if not 1 <= i <= len(self.entries):
            raise IndexError(f"student layer {i} outside 1..{len(self.entries)}")
        return self.entries[i - 1]

    def __len__(self):
        return len(self.entries)

    @property
    def fan_in(self) -> list[int]:
        return [len(e) for e in self.entries]

    @property
    def is_singleton(self) -> bool:
        return all(len(e) == 1 for e in self.entries)

    def used(self) -> set[int]:
        return {j for e in self.entries for j in e}

    def skipped(self) -> set[int]:
        return set(range(1, self.n_teacher + 1)) - self.used()

    def to_json(self) -> list[list[int]]:
        return [list(e) for e in self.entries]

    def describe(self) -> str:
        return ", ".join(f"M({i})={{{','.join(map(str, e))}}}" for i, e in enumerate(self.entries, 1))


@dataclass
class MappingReport:
    ok: bool
    violations: list[str] = field(default_factory=list)
    coverage: bool = False
    skipped: set[int] = field(default_factory=set)

    def __bool__(self):
        return self.ok


def _even_starts(n_t: int, n_s: int, width: int) -> list[int]:
    if n_s == 1:
        return [1]
    span = n_t - width
    return [1 + math.floor(k * span / (n_s - 1) + 0.5) for k in range(n_s)]


def _rc_blocks(n_t: int, n_s: int) -> list[list[int]]:
    base, extra = divmod(n_t, n_s)
    blocks, start = [], 1
    for k in range(n_s):
        size = base + (1 if k < extra else 0)
        blocks.append(list(range(start, start + size)))
        start += size
    return blocks


def generate_mapping(variant: str, n_teacher: int, n_student: int) -> LayerMapping:
    variant = variant.upper()
    if variant not in VARIANTS:
        raise ConfigError(f"unknown variant {variant!r}; expected one of {VARIANTS}", "mapping.variant")
    if n_student < 1 or n_teacher < 1:
        raise ConfigError("layer counts must be positive", "mapping")
    if n_student > n_teacher:
        raise ConfigError(
            f"student has more layers ({n_student}) than teacher ({n_teacher})", "mapping"
        )
    n_t, n_s = n_teacher, n_student

    if variant == "RC":
        entries = _rc_blocks(n_t, n_s)
    elif variant == "OC":
        width = min(2 * math.ceil(n_t / (n_s + 1)), n_t)
        entries = [list(range(s, s + width)) for s in _even_starts(n_t, n_s, width)]
    elif variant == "SC":
        width = n_t // (n_s + 1)
        if width == 0:
            raise ConfigError(
                f"SC needs at least {n_s + 1} teacher layers for {n_s} student layers "
                f"(window width floor({n_t}/{n_s + 1}) is zero)",
                "mapping.variant",
            )
        entries = [list(range(s, s + width)) for s in _even_starts(n_t, n_s, width)]
    elif variant == "CC":
        if (n_t, n_s) in _CC_PINNED:
            entries = [list(e) for e in _CC_PINNED[(n_t, n_s)]]
        else:
            entries = [block[::2] for block in _rc_blocks(n_t, n_s)]
    else:
        entries = [[i * n_t // n_s] for i in range(1, n_s + 1)]

    return LayerMapping(tuple(tuple(e) for e in entries), n_t, n_s, variant)


def mapping_from_explicit(entries, n_teacher: int, n_student: int) -> LayerMapping:
    mapping = LayerMapping(tuple(tuple(e) for e in entries), n_teacher, n_student, "explicit")
    report = validate_mapping(mapping, n_teacher, n_student)
    if not report.ok:
        raise ConfigError("; ".join(report.violations), "mapping.explicit")
    return mapping


def validate_mapping(mapping: LayerMapping, n_teacher: int, n_student: int) -> MappingReport:
    """Check ranges and shape; never raises."""
    violations = []
    if len(mapping.entries) != n_student:
        violations.append(f"expected {n_student} entries (one per student layer), got {len(mapping.entries)}")
    for i, entry in enumerate(mapping.entries, 1):
        if not entry:
            violations.append(f"M({i}) is empty")
            continue
        for j in entry:
            if not 1 <= j <= n_teacher:
                violations.append(f"M({i}) index {j} out of range 1..{n_teacher}")
        if any(b <= a for a, b in zip(entry, entry[1:])):
            violations.append(f"M({i}) indices are not strictly increasing")
    used = {j for e in mapping.entries for j in e if 1 <= j <= n_teacher}
    skipped = set(range(1, n_teacher + 1)) - used
    return MappingReport(not violations, violations, not skipped, skipped)


def fusion_param_shapes(mapping: LayerMapping, d: int) -> list[tuple[tuple[int, int], tuple[int]]]:
    if d < 1:
        raise ConfigError("d must be positive", "d")
    return [((d, k * d), (d,)) for k in mapping.fan_in]


def fusion_param_count(mapping: LayerMapping, d: int) -> int:
    return sum(w[0] * w[1] + b[0] for w, b in fusion_param_shapes(mapping, d))
