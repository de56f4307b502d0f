"""Hypothesis functions mapping an integer label to a target mask ratio in [0, 1]."""

from __future__ import annotations

from dataclasses import dataclass, field

FAMILIES = ("linear", "power-decay", "inverse-power-verbatim", "alternating", "constant", "custom-table")

_ALIASES = {
    "power": "power-decay",
    "inverse-power": "inverse-power-verbatim",
    "inv-power": "inverse-power-verbatim",
    "table": "custom-table",
    "sign": "alternating",
}


class HypothesisError(ValueError):
    pass


@dataclass(frozen=True)
class Hypothesis:
    name: str
    family: str
    label_range: tuple[int, int]
    params: tuple[float, ...] = field(default=())

    def __post_init__(self):
        if self.family not in FAMILIES:
            raise HypothesisError(f"unknown hypothesis family {self.family!r}")
        lo, hi = (int(v) for v in self.label_range)
        object.__setattr__(self, "label_range", (lo, hi))
        object.__setattr__(self, "params", tuple(float(p) for p in self.params))
        if lo > hi:
            raise HypothesisError(f"empty label range {self.label_range}")
        if self.family in ("linear", "power-decay") and lo == hi:
            raise HypothesisError(f"{self.family} needs t_max > t_min")
        if self.family == "inverse-power-verbatim" and lo < 1:
            raise HypothesisError("inverse-power-verbatim is only defined for t >= 1")
        if self.family == "custom-table" and len(self.params) != hi - lo + 1:
            raise HypothesisError(f"custom table needs {hi - lo + 1} values, got {len(self.params)}")
        for t in self.labels():
            v = self(t)
            if not 0.0 <= v <= 1.0:
                raise HypothesisError(f"{self.name}: g({t}) = {v} is outside [0, 1]")

    def labels(self) -> range:
        return range(self.label_range[0], self.label_range[1] + 1)

    def __call__(self, t: int) -> float:
        return g_eval(self, t)

    def values(self) -> list[float]:
        return [self(t) for t in self.labels()]

    def spec(self) -> str:
        if not self.params or self.family in ("linear", "alternating"):
            return self.family
        return f"{self.family}:" + ",".join(repr(p) for p in self.params)


def g_eval(h: Hypothesis, t: int) -> float:
    lo, hi = h.label_range
    if not lo <= t <= hi:
        raise HypothesisError(f"label {t} outside range [{lo}, {hi}]")
    fam = h.family
    if fam == "linear":
        return (hi - t) / (hi - lo)
    if fam == "power-decay":
        alpha = h.params[0] if h.params else 1.0
        return ((hi - t) / (hi - lo)) ** alpha
    if fam == "inverse-power-verbatim":
        if t < 1:
            raise HypothesisError("inverse-power-verbatim is only defined for t >= 1")
        p = h.params[0] if h.params else 1.0
        return min(1.0, max(0.0, 1.0 - t ** (-p)))
    if fam == "alternating":
        return float((t - lo) % 2)
    if fam == "constant":
        return h.params[0] if h.params else 0.5
    return h.params[t - lo]  # custom-table


def monotonicity_check(h: Hypothesis) -> str:
    """``"decreasing"``, ``"increasing"`` or ``"neither"`` under non-strict comparison.

    A constant function satisfies both and is reported as decreasing; use
    :func:`is_constant` to tell it apart.
    """
    v = h.values()
    pairs = list(zip(v, v[1:]))
    if all(b <= a for a, b in pairs):
        return "decreasing"
    if all(b >= a for a, b in pairs):
        return "increasing"
    return "neither"


def is_constant(h: Hypothesis) -> bool:
    v = h.values()
    return all(x == v[0] for x in v)


def parse_hypothesis(text: str, label_range: tuple[int, int], name: str | None = None) -> Hypothesis:
    """Build a hypothesis from ``FAMILY[:P1,P2,...]``, e.g. ``power-decay:2`` or ``constant:0.5``."""
    fam, _, rest = text.strip().partition(":")
    fam = _ALIASES.get(fam.strip().lower(), fam.strip().lower())
    try:
        params = tuple(float(p) for p in rest.split(",")) if rest.strip() else ()
    except ValueError:
        raise HypothesisError(f"bad hypothesis parameters in {text!r}") from None
    if fam in ("power-decay", "inverse-power-verbatim", "constant") and len(params) > 1:
        raise HypothesisError(f"{fam} takes one parameter")
    if fam in ("linear", "alternating") and params:
        raise HypothesisError(f"{fam} takes no parameters")
    return Hypothesis(name or text.strip(), fam, tuple(label_range), params)
