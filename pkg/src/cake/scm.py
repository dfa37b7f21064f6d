"""Discrete structural causal model for checking the style adjustment by enumeration.

Graph: ``D -> S_C``, ``D -> S_I``, ``(C, S_C, S_I) -> X`` and ``C -> Y``.
The label table is stored in full generality, ``P(Y | C, S_C, S_I, D)``, so
that models violating the "label depends on concept only" assumption can be
expressed and their divergence reported.
"""

from __future__ import annotations

import configparser
import itertools
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from .errors import ScmError

_TOL = 1e-12


def _check_rows(name, table):
    table = np.asarray(table, dtype=np.float64)
    if np.any(table < 0) or np.any(np.abs(table.sum(axis=-1) - 1.0) > _TOL):
        raise ScmError(f"every row of {name} must be a probability vector")
    return table


@dataclass(frozen=True)
class ScmSpec:
    """Cardinalities are implied by the table shapes.

    ``p_y`` has shape ``(n_c, n_sc, n_si, n_d, n_y)``. ``obs`` maps every
    ``(c, s_c, s_i)`` to an observation value; it defaults to the tuple itself.
    """

    p_d: np.ndarray
    p_c: np.ndarray
    p_sc_given_d: np.ndarray
    p_si_given_d: np.ndarray
    p_y: np.ndarray
    obs: dict | None = None

    def __post_init__(self):
        p_d = _check_rows("P(D)", self.p_d)
        p_c = _check_rows("P(C)", self.p_c)
        p_sc = _check_rows("P(S_C|D)", self.p_sc_given_d)
        p_si = _check_rows("P(S_I|D)", self.p_si_given_d)
        p_y = _check_rows("P(Y|...)", self.p_y)
        n_d, n_c = p_d.size, p_c.size
        if p_sc.ndim != 2 or p_sc.shape[0] != n_d or p_si.ndim != 2 or p_si.shape[0] != n_d:
            raise ScmError("style tables must have one row per domain value")
        if p_y.shape[:4] != (n_c, p_sc.shape[1], p_si.shape[1], n_d):
            raise ScmError(f"P(Y|C,S_C,S_I,D) has shape {p_y.shape}, expected {(n_c, p_sc.shape[1], p_si.shape[1], n_d)} + (n_y,)")
        obs = self.obs
        if obs is None:
            obs = {a: a for a in self.latent_assignments(p_c.size, p_sc.shape[1], p_si.shape[1])}
        if len(set(obs.values())) != len(obs):
            raise ScmError("observation map must be injective on (C, S_C, S_I)")
        for name, val in (("p_d", p_d), ("p_c", p_c), ("p_sc_given_d", p_sc), ("p_si_given_d", p_si), ("p_y", p_y)):
            object.__setattr__(self, name, val)
        object.__setattr__(self, "obs", dict(obs))

    @classmethod
    def from_label_table(cls, p_d, p_c, p_sc_given_d, p_si_given_d, p_y_given_c, obs=None):
        """Build a model whose label depends on the concept only."""
        p_y_given_c = np.asarray(p_y_given_c, dtype=np.float64)
        n_sc, n_si, n_d = np.shape(p_sc_given_d)[1], np.shape(p_si_given_d)[1], np.size(p_d)
        p_y = np.broadcast_to(p_y_given_c[:, None, None, None, :],
                              (p_y_given_c.shape[0], n_sc, n_si, n_d, p_y_given_c.shape[1])).copy()
        return cls(p_d, p_c, p_sc_given_d, p_si_given_d, p_y, obs)

    @staticmethod
    def latent_assignments(n_c, n_sc, n_si):
        return list(itertools.product(range(n_c), range(n_sc), range(n_si)))

    @property
    def cards(self) -> dict:
        n_c, n_sc, n_si, n_d, n_y = self.p_y.shape
        return {"c": n_c, "sc": n_sc, "si": n_si, "d": n_d, "y": n_y}

    @property
    def label_depends_on_concept_only(self) -> bool:
        ref = self.p_y[:, :1, :1, :1, :]
        return bool(np.allclose(self.p_y, ref, rtol=0, atol=_TOL))

    def observations(self):
        return list(self.obs.values())

    def preimage(self, x_value):
        for lat, x in self.obs.items():
            if x == x_value:
                return lat
        raise ScmError(f"no latent assignment renders to x = {x_value!r}")

    def joint(self, c, sc, si, d) -> float:
        """Observational ``P(C=c, S_C=sc, S_I=si, D=d)``."""
        return float(self.p_c[c] * self.p_d[d] * self.p_sc_given_d[d, sc] * self.p_si_given_d[d, si])


def scm_interventional_bruteforce(scm: ScmSpec, x_value) -> np.ndarray:
    """``P(Y | do(X = x))`` by enumerating the mutilated model.

    Setting ``X`` sets its disentangled components, which cuts every edge into
    ``C``, ``S_C`` and ``S_I`` (in particular ``D -> S_C`` and ``D -> S_I``).
    ``D`` keeps its prior and ``Y`` keeps its mechanism; the joint over all
    variables is enumerated and marginalised onto ``Y``.
    """
    c0, sc0, si0 = scm.preimage(x_value)
    k = scm.cards
    out = np.zeros(k["y"])
    for c, sc, si, d, y in itertools.product(range(k["c"]), range(k["sc"]), range(k["si"]), range(k["d"]), range(k["y"])):
        clamp = float(c == c0 and sc == sc0 and si == si0)
        if clamp == 0.0:
            continue
        out[y] += clamp * scm.p_d[d] * scm.p_y[c, sc, si, d, y]
    return out / out.sum()


def scm_adjustment_estimate(scm: ScmSpec, x_value, styles=None) -> np.ndarray:
    """Style adjustment: keep the concept of ``x`` and average the label
    mechanism over domains and the given style interventions.

    ``sum_d sum_(sc,si) P(Y | c, sc, si, d) P(c, sc, si, d)``, normalised by
    the total weight of the summed strata. ``styles`` is an iterable of
    ``(sc, si)`` pairs; ``None`` means the complete style set.
    """
    c0, _, _ = scm.preimage(x_value)
    k = scm.cards
    if styles is None:
        styles = list(itertools.product(range(k["sc"]), range(k["si"])))
    styles = list(styles)
    if not styles:
        raise ScmError("style intervention set is empty")
    out = np.zeros(k["y"])
    total = 0.0
    for d in range(k["d"]):
        for sc, si in styles:
            w = scm.joint(c0, sc, si, d)
            out += scm.p_y[c0, sc, si, d] * w
            total += w
    if total <= 0.0:
        raise ScmError("style intervention set has zero probability mass")
    return out / total


def scm_observational(scm: ScmSpec, x_value) -> np.ndarray:
    """Plain conditional ``P(Y | X = x)``."""
    c0, sc0, si0 = scm.preimage(x_value)
    w = np.array([scm.joint(c0, sc0, si0, d) for d in range(scm.cards["d"])])
    if w.sum() <= 0.0:
        raise ScmError(f"x = {x_value!r} has zero probability")
    return (w / w.sum()) @ scm.p_y[c0, sc0, si0]


def total_variation(p, q) -> float:
    return 0.5 * float(np.abs(np.asarray(p) - np.asarray(q)).sum())


def subsample_styles(scm: ScmSpec, size: int, rng: np.random.Generator):
    """Draw ``size`` distinct style pairs (or all of them if fewer exist)."""
    k = scm.cards
    allp = list(itertools.product(range(k["sc"]), range(k["si"])))
    idx = rng.choice(len(allp), size=min(size, len(allp)), replace=False)
    return [allp[i] for i in sorted(idx)]


# -- config files --------------------------------------------------------------

def _parse_table(text: str) -> np.ndarray:
    rows = [r.split() for r in text.replace(";", "|").split("|") if r.strip()]
    return np.array([[float(v) for v in r] for r in rows])


def default_scm() -> ScmSpec:
    """Two classes, binary concept, styles and domain; label depends on the concept only."""
    return ScmSpec.from_label_table(
        p_d=[0.6, 0.4],
        p_c=[0.3, 0.7],
        p_sc_given_d=[[0.8, 0.2], [0.25, 0.75]],
        p_si_given_d=[[0.6, 0.4], [0.35, 0.65]],
        p_y_given_c=[[0.9, 0.1], [0.15, 0.85]],
    )


def load_scm(path) -> ScmSpec:
    """Read an SCM from an INI-style file.

    Sections and keys::

        [cpt]
        p_d = 0.6 0.4
        p_c = 0.3 0.7
        p_sc_given_d = 0.8 0.2 | 0.25 0.75
        p_si_given_d = 0.6 0.4 | 0.35 0.65
        p_y_given_c = 0.9 0.1 | 0.15 0.85
        # or, to let the label depend on cross-domain style:
        # p_y_given_c_sc = <row for (c=0,sc=0)> | <(0,1)> | <(1,0)> | <(1,1)>

    An optional ``[variables]`` section (``c``, ``sc``, ``si``, ``d``, ``y``)
    is cross-checked against the table shapes.
    """
    cp = configparser.ConfigParser(inline_comment_prefixes=("#",))
    if not cp.read(Path(path), encoding="utf-8"):
        raise ScmError(f"cannot read SCM config {path}")
    if "cpt" not in cp:
        raise ScmError("SCM config needs a [cpt] section")
    t = {key: _parse_table(val) for key, val in cp["cpt"].items()}
    try:
        p_d, p_c = t["p_d"].reshape(-1), t["p_c"].reshape(-1)
        p_sc, p_si = t["p_sc_given_d"], t["p_si_given_d"]
    except KeyError as exc:
        raise ScmError(f"SCM config missing table {exc}") from None
    if "p_y_given_c_sc" in t:
        n_c, n_sc, n_si, n_d = p_c.size, p_sc.shape[1], p_si.shape[1], p_d.size
        tab = t["p_y_given_c_sc"].reshape(n_c, n_sc, -1)
        p_y = np.broadcast_to(tab[:, :, None, None, :], (n_c, n_sc, n_si, n_d, tab.shape[-1])).copy()
        scm = ScmSpec(p_d, p_c, p_sc, p_si, p_y)
    elif "p_y_given_c" in t:
        scm = ScmSpec.from_label_table(p_d, p_c, p_sc, p_si, t["p_y_given_c"])
    else:
        raise ScmError("SCM config needs p_y_given_c or p_y_given_c_sc")
    if "variables" in cp:
        for key, val in cp["variables"].items():
            if key not in scm.cards:
                raise ScmError(f"unknown variable {key!r}; expected one of {sorted(scm.cards)}")
            if int(val) != scm.cards[key]:
                raise ScmError(f"variable {key} declared with {val} values but tables imply {scm.cards[key]}")
    return scm


def dump_scm(scm: ScmSpec) -> str:
    def row(a):
        return " ".join(format(float(v), ".17g") for v in a)

    def table(a):
        return " | ".join(row(r) for r in np.atleast_2d(a))

    lines = ["[variables]"] + [f"{k} = {v}" for k, v in scm.cards.items()] + ["", "[cpt]"]
    lines += [f"p_d = {row(scm.p_d)}", f"p_c = {row(scm.p_c)}",
              f"p_sc_given_d = {table(scm.p_sc_given_d)}", f"p_si_given_d = {table(scm.p_si_given_d)}"]
    if scm.label_depends_on_concept_only:
        lines.append(f"p_y_given_c = {table(scm.p_y[:, 0, 0, 0])}")
    else:
        k = scm.cards
        lines.append(f"p_y_given_c_sc = {table(scm.p_y[:, :, 0, 0].reshape(k['c'] * k['sc'], k['y']))}")
    return "\n".join(lines) + "\n"


@dataclass
class VerifyReport:
    max_tv: float
    per_x: dict
    subsample_gap: float
    observational_gap: float
    passed: bool
    tolerance: float


def verify_adjustment(scm: ScmSpec, tolerance: float = 1e-10, n_g: int = 2, seed: int = 0) -> VerifyReport:
    """Compare full-set adjustment to brute force for every observation value.

    Also measures (without asserting) the gap for a subsampled set of
    ``2 * n_g`` style pairs and the gap between adjustment and the plain
    conditional.
    """
    rng = np.random.default_rng(seed)
    per_x, sub_gap, obs_gap = {}, 0.0, 0.0
    subset = subsample_styles(scm, 2 * n_g, rng)
    for x in scm.observations():
        brute = scm_interventional_bruteforce(scm, x)
        adj = scm_adjustment_estimate(scm, x)
        per_x[x] = total_variation(brute, adj)
        try:
            sub_gap = max(sub_gap, total_variation(brute, scm_adjustment_estimate(scm, x, subset)))
        except ScmError:
            pass
        obs_gap = max(obs_gap, total_variation(adj, scm_observational(scm, x)))
    max_tv = max(per_x.values())
    return VerifyReport(max_tv, per_x, sub_gap, obs_gap, max_tv < tolerance, tolerance)
