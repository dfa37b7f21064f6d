"""Synthetic SSDA data from an explicit disentangled causal model.

Each observation is rendered from three mutually independent latents:
a class-conditional concept ``c``, a cross-domain style ``s_c`` whose
distribution depends on the domain, and an intra-domain style ``s_i``::

    x = tanh(A_c c + A_sc s_c + A_si s_i) + noise

The noise is drawn from a generator keyed on the sample id, so any sample can
be re-rendered bit-for-bit from its latents.
"""

from __future__ import annotations

import csv
import enum
from collections import Counter
from dataclasses import dataclass, field
from pathlib import Path
from typing import Iterable

import numpy as np

from .errors import DimensionError, InfeasibleSizesError, SealedSampleError

SPLITS = ("s_l", "t_l", "t_u", "t_test")
LABELED_SPLITS = ("s_l", "t_l")


class Domain(str, enum.Enum):
    SOURCE = "source"
    TARGET = "target"


def zipf_marginal(n_classes: int, alpha: float) -> np.ndarray:
    """Label marginal with ``p_k ∝ (k+1)^-alpha``; class 0 is the head."""
    w = np.arange(1, n_classes + 1, dtype=np.float64) ** -float(alpha)
    return w / w.sum()


def uniform_marginal(n_classes: int) -> np.ndarray:
    return np.full(n_classes, 1.0 / n_classes)


@dataclass(frozen=True)
class DomainSpec:
    """Per-domain style distribution and label marginal."""

    style_mean: np.ndarray
    style_cov: np.ndarray
    label_marginal: np.ndarray
    noise_sigma: float = 0.0
    intra_sigma: float = 1.0
    name: str = ""

    def __post_init__(self):
        mean = np.asarray(self.style_mean, dtype=np.float64).reshape(-1)
        cov = np.asarray(self.style_cov, dtype=np.float64)
        marg = np.asarray(self.label_marginal, dtype=np.float64).reshape(-1)
        if cov.shape != (mean.size, mean.size):
            raise DimensionError(f"style_cov shape {cov.shape} does not match style_mean size {mean.size}")
        if np.any(marg < 0) or abs(marg.sum() - 1.0) > 1e-12:
            raise ValueError(f"label_marginal must be a probability vector (sum={marg.sum()!r})")
        if self.noise_sigma < 0 or self.intra_sigma < 0:
            raise ValueError("noise_sigma and intra_sigma must be nonnegative")
        object.__setattr__(self, "style_mean", mean)
        object.__setattr__(self, "style_cov", cov)
        object.__setattr__(self, "label_marginal", marg)

    @property
    def n_classes(self) -> int:
        return self.label_marginal.size

    @property
    def d_sc(self) -> int:
        return self.style_mean.size

    def sample_cross_style(self, n: int, rng: np.random.Generator) -> np.ndarray:
        chol = np.linalg.cholesky(self.style_cov)
        return self.style_mean + rng.standard_normal((n, self.d_sc)) @ chol.T

    def sample_intra_style(self, n: int, d_si: int, rng: np.random.Generator) -> np.ndarray:
        return self.intra_sigma * rng.standard_normal((n, d_si))


@dataclass(frozen=True)
class ConceptSpec:
    """Class-conditional Gaussian concepts with means at ``scale * e_k``."""

    n_classes: int
    scale: float = 3.0
    sigma: float = 0.5

    @property
    def dim(self) -> int:
        return self.n_classes

    @property
    def means(self) -> np.ndarray:
        return self.scale * np.eye(self.n_classes)

    def sample(self, y: np.ndarray, rng: np.random.Generator) -> np.ndarray:
        y = np.asarray(y, dtype=np.int64)
        return self.means[y] + self.sigma * rng.standard_normal((y.size, self.dim))


@dataclass(frozen=True)
class RenderParams:
    a_c: np.ndarray
    a_sc: np.ndarray
    a_si: np.ndarray
    noise_seed: int = 0

    @property
    def d_x(self) -> int:
        return self.a_c.shape[0]

    @property
    def dims(self) -> tuple[int, int, int, int]:
        return self.d_x, self.a_c.shape[1], self.a_sc.shape[1], self.a_si.shape[1]

    @property
    def mixing(self) -> np.ndarray:
        """Stacked ``[A_c | A_sc | A_si]``."""
        return np.hstack([self.a_c, self.a_sc, self.a_si])


def make_render_params(d_x, d_c, d_sc, d_si, seed=0, concept_gain=1.0, style_gain=1.0, intra_gain=1.0):
    if d_x < d_c + d_sc + d_si:
        raise DimensionError("d_x must be at least d_c + d_sc + d_si for the render map to be invertible")
    rng = np.random.default_rng(np.random.SeedSequence([seed, 0x52454E44]))
    a_c = concept_gain * rng.standard_normal((d_x, d_c)) / np.sqrt(d_c)
    a_sc = style_gain * rng.standard_normal((d_x, d_sc)) / np.sqrt(d_sc)
    a_si = intra_gain * rng.standard_normal((d_x, d_si)) / np.sqrt(d_si)
    return RenderParams(a_c, a_sc, a_si, noise_seed=int(seed))


def sample_noise(ids, d_x: int, sigma: float, seed: int) -> np.ndarray:
    """Observation noise, fixed per sample id."""
    ids = np.atleast_1d(np.asarray(ids, dtype=np.int64))
    out = np.zeros((ids.size, d_x))
    if sigma == 0.0:
        return out
    for row, i in enumerate(ids):
        out[row] = sigma * np.random.default_rng([int(seed), int(i)]).standard_normal(d_x)
    return out


def _check_latent_dims(c, s_c, s_i, params: RenderParams):
    _, d_c, d_sc, d_si = params.dims
    if c.shape[-1] != d_c or s_c.shape[-1] != d_sc or s_i.shape[-1] != d_si:
        raise DimensionError(
            f"latent dims (c={c.shape[-1]}, s_c={s_c.shape[-1]}, s_i={s_i.shape[-1]}) "
            f"do not match render params (c={d_c}, s_c={d_sc}, s_i={d_si})"
        )


def pre_activation(c, s_c, s_i, params: RenderParams) -> np.ndarray:
    """``A_c c + A_sc s_c + A_si s_i`` row-wise."""
    lat = np.hstack([np.atleast_2d(c), np.atleast_2d(s_c), np.atleast_2d(s_i)])
    # elementwise product and sum instead of a matmul: BLAS kernels differ
    # between one row and many, this reduction does not
    return (lat[:, None, :] * params.mixing[None, :, :]).sum(axis=2)


def render_batch(c, s_c, s_i, params: RenderParams, ids=None, noise_sigma: float = 0.0) -> np.ndarray:
    c, s_c, s_i = (np.atleast_2d(np.asarray(a, dtype=np.float64)) for a in (c, s_c, s_i))
    _check_latent_dims(c, s_c, s_i, params)
    x = np.tanh(pre_activation(c, s_c, s_i, params))
    if noise_sigma > 0.0:
        if ids is None:
            raise ValueError("noisy rendering needs sample ids")
        x = x + sample_noise(ids, params.d_x, noise_sigma, params.noise_seed)
    return x


def render(c, s_c, s_i, params: RenderParams, sample_id=None, noise_sigma: float = 0.0) -> np.ndarray:
    """Render one observation from its latents."""
    ids = None if sample_id is None else [sample_id]
    return render_batch(c, s_c, s_i, params, ids, noise_sigma)[0]


def recover_latents(x, params: RenderParams, ridge: float = 0.0):
    """Invert the render map: arctanh, then (ridge) least squares.

    Exact in noiseless mode; with noise it is the least-squares estimate.
    Returns ``(c, s_c, s_i)`` arrays with one row per input row.
    """
    x = np.atleast_2d(np.asarray(x, dtype=np.float64))
    z = np.arctanh(np.clip(x, -1 + 1e-12, 1 - 1e-12))
    a = params.mixing
    if ridge > 0.0:
        lat = np.linalg.solve(a.T @ a + ridge * np.eye(a.shape[1]), a.T @ z.T).T
    else:
        lat = np.linalg.lstsq(a, z.T, rcond=None)[0].T
    _, d_c, d_sc, _ = params.dims
    return lat[:, :d_c], lat[:, d_c:d_c + d_sc], lat[:, d_c + d_sc:]


@dataclass(frozen=True)
class Sample:
    x: np.ndarray
    y: int
    c: np.ndarray
    s_c: np.ndarray
    s_i: np.ndarray
    domain: Domain
    labeled: bool
    id: int

    @property
    def sealed(self) -> bool:
        return self.c is None


@dataclass(frozen=True)
class Split:
    """One split stored column-wise; arrays are read-only."""

    name: str
    domain: Domain
    labeled: bool
    ids: np.ndarray
    x: np.ndarray
    y: np.ndarray
    c: np.ndarray | None = None
    s_c: np.ndarray | None = None
    s_i: np.ndarray | None = None

    def __post_init__(self):
        for name in ("ids", "x", "y", "c", "s_c", "s_i"):
            arr = getattr(self, name)
            if arr is not None:
                arr = np.array(arr, copy=True)
                arr.setflags(write=False)
                object.__setattr__(self, name, arr)

    def __len__(self):
        return int(self.ids.size)

    @property
    def has_latents(self) -> bool:
        return self.c is not None

    def sample(self, i: int) -> Sample:
        lat = (self.c[i], self.s_c[i], self.s_i[i]) if self.has_latents else (None, None, None)
        return Sample(self.x[i], int(self.y[i]), *lat, domain=self.domain, labeled=self.labeled, id=int(self.ids[i]))

    def samples(self) -> list[Sample]:
        return [self.sample(i) for i in range(len(self))]


@dataclass(frozen=True)
class BundleSizes:
    n_s: int = 2000
    shots: int = 3
    n_u: int = 1000
    n_test: int = 1000


@dataclass
class DatasetBundle:
    """The SSDA splits plus the generative parameters that produced them.

    Training code reads features through :meth:`features` and labels through
    :meth:`labels`, which refuses the unlabeled and test splits. Hidden labels
    are only reachable via :meth:`hidden_labels`, which records every access in
    ``audit`` keyed by ``(split, purpose)``.
    """

    s_l: Split
    t_l: Split
    t_u: Split
    t_test: Split
    source: DomainSpec | None = None
    target: DomainSpec | None = None
    concept: ConceptSpec | None = None
    render: RenderParams | None = None
    audit: Counter = field(default_factory=Counter, compare=False, repr=False)

    def split(self, name: str) -> Split:
        if name not in SPLITS:
            raise KeyError(f"unknown split {name!r}; expected one of {SPLITS}")
        return getattr(self, name)

    def features(self, name: str) -> np.ndarray:
        return self.split(name).x

    def labels(self, name: str) -> np.ndarray:
        if name not in LABELED_SPLITS:
            raise SealedSampleError(f"labels of split {name!r} are hidden from training code")
        return self.split(name).y

    def hidden_labels(self, name: str, purpose: str) -> np.ndarray:
        self.audit[(name, purpose)] += 1
        return self.split(name).y

    def samples(self, name: str) -> list[Sample]:
        return self.split(name).samples()

    @property
    def n_classes(self) -> int:
        return int(self.source.n_classes) if self.source is not None else int(self.s_l.y.max()) + 1

    @property
    def d_x(self) -> int:
        return int(self.s_l.x.shape[1])

    def all_ids(self) -> list[np.ndarray]:
        return [self.split(s).ids for s in SPLITS]


def _draw_split(name, domain_spec, domain, labeled, y, first_id, concept, render_p, rngs):
    n = y.size
    c = concept.sample(y, rngs["concept"])
    s_c = domain_spec.sample_cross_style(n, rngs["style_c"])
    s_i = domain_spec.sample_intra_style(n, render_p.dims[3], rngs["style_i"])
    ids = np.arange(first_id, first_id + n, dtype=np.int64)
    x = render_batch(c, s_c, s_i, render_p, ids, domain_spec.noise_sigma)
    return Split(name, domain, labeled, ids, x, y, c, s_c, s_i)


def generate_bundle(
    source: DomainSpec,
    target: DomainSpec,
    sizes: BundleSizes,
    seed: int,
    concept: ConceptSpec | None = None,
    render_params: RenderParams | None = None,
) -> DatasetBundle:
    """Draw the four SSDA splits; deterministic given the arguments."""
    k = source.n_classes
    if target.n_classes != k:
        raise DimensionError("source and target label marginals have different class counts")
    if source.d_sc != target.d_sc:
        raise DimensionError("source and target cross-domain style dims differ")
    if min(sizes.n_s, sizes.shots, sizes.n_u, sizes.n_test) <= 0:
        raise InfeasibleSizesError(f"all sizes must be positive, got {sizes}")
    n_l = sizes.shots * k
    if n_l > sizes.n_u:
        raise InfeasibleSizesError(f"shots*K = {n_l} exceeds n_u = {sizes.n_u}")
    if sizes.n_s < 10 * n_l:
        raise InfeasibleSizesError(f"n_s = {sizes.n_s} must be at least 10 * shots * K = {10 * n_l}")
    concept = concept or ConceptSpec(k)
    if concept.n_classes != k:
        raise DimensionError("concept spec class count differs from label marginal")
    if render_params is None:
        d_x = max(32, concept.dim + source.d_sc + 4)
        render_params = make_render_params(d_x, concept.dim, source.d_sc, 4, seed)
    _check_latent_dims(np.zeros(concept.dim), np.zeros(source.d_sc), np.zeros(render_params.dims[3]), render_params)

    streams = np.random.SeedSequence(seed).spawn(4)
    rngs = {
        "labels": np.random.default_rng(streams[0]),
        "concept": np.random.default_rng(streams[1]),
        "style_c": np.random.default_rng(streams[2]),
        "style_i": np.random.default_rng(streams[3]),
    }
    lab = rngs["labels"]
    y_s = lab.choice(k, size=sizes.n_s, p=source.label_marginal)
    y_tl = np.repeat(np.arange(k), sizes.shots)
    y_tu = lab.choice(k, size=sizes.n_u, p=target.label_marginal)
    y_te = lab.choice(k, size=sizes.n_test, p=target.label_marginal)

    args = (concept, render_params, rngs)
    s_l = _draw_split("s_l", source, Domain.SOURCE, True, y_s, 0, *args)
    t_l = _draw_split("t_l", target, Domain.TARGET, True, y_tl, sizes.n_s, *args)
    t_u = _draw_split("t_u", target, Domain.TARGET, False, y_tu, sizes.n_s + n_l, *args)
    t_te = _draw_split("t_test", target, Domain.TARGET, False, y_te, sizes.n_s + n_l + sizes.n_u, *args)
    return DatasetBundle(s_l, t_l, t_u, t_te, source, target, concept, render_params)


# -- CSV dump/load -----------------------------------------------------------

def _fmt(v: float) -> str:
    return format(float(v), ".17g")


def write_bundle_csv(bundle: DatasetBundle, path) -> tuple[Path, Path]:
    """Write ``path`` (observations) and ``<stem>.latents.csv`` next to it."""
    path = Path(path)
    lat_path = path.with_name(path.stem + ".latents.csv")
    d_x = bundle.d_x
    with open(path, "w", newline="", encoding="utf-8") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["id", "domain", "split", "y", "labeled"] + [f"x_{j}" for j in range(d_x)])
        for name in SPLITS:
            sp = bundle.split(name)
            for i in range(len(sp)):
                w.writerow([int(sp.ids[i]), sp.domain.value, name, int(sp.y[i]), int(sp.labeled)]
                           + [_fmt(v) for v in sp.x[i]])
    if bundle.s_l.has_latents:
        d_c, d_sc, d_si = bundle.s_l.c.shape[1], bundle.s_l.s_c.shape[1], bundle.s_l.s_i.shape[1]
        with open(lat_path, "w", newline="", encoding="utf-8") as fh:
            w = csv.writer(fh, lineterminator="\n")
            w.writerow(["id"] + [f"c_{j}" for j in range(d_c)] + [f"sc_{j}" for j in range(d_sc)]
                       + [f"si_{j}" for j in range(d_si)])
            for name in SPLITS:
                sp = bundle.split(name)
                for i in range(len(sp)):
                    w.writerow([int(sp.ids[i])] + [_fmt(v) for v in np.concatenate([sp.c[i], sp.s_c[i], sp.s_i[i]])])
    return path, lat_path


def read_bundle_csv(path, **specs) -> DatasetBundle:
    """Inverse of :func:`write_bundle_csv`. Latents are attached if the sibling file exists."""
    path = Path(path)
    rows: dict[str, list] = {s: [] for s in SPLITS}
    with open(path, newline="", encoding="utf-8") as fh:
        r = csv.reader(fh)
        header = next(r)
        d_x = sum(h.startswith("x_") for h in header)
        for row in r:
            rows[row[2]].append(row)
    latents = {}
    lat_path = path.with_name(path.stem + ".latents.csv")
    dims = None
    if lat_path.exists():
        with open(lat_path, newline="", encoding="utf-8") as fh:
            r = csv.reader(fh)
            header = next(r)
            dims = [sum(h.startswith(p) for h in header) for p in ("c_", "sc_", "si_")]
            for row in r:
                latents[int(row[0])] = np.array([float(v) for v in row[1:]])
    splits = {}
    for name in SPLITS:
        rr = rows[name]
        ids = np.array([int(r[0]) for r in rr], dtype=np.int64)
        x = np.array([[float(v) for v in r[5:5 + d_x]] for r in rr]).reshape(len(rr), d_x)
        y = np.array([int(r[3]) for r in rr], dtype=np.int64)
        domain = Domain(rr[0][1]) if rr else (Domain.SOURCE if name == "s_l" else Domain.TARGET)
        labeled = bool(int(rr[0][4])) if rr else name in LABELED_SPLITS
        lat = [None, None, None]
        if dims is not None:
            m = np.array([latents[int(i)] for i in ids]).reshape(len(rr), sum(dims))
            lat = [m[:, :dims[0]], m[:, dims[0]:dims[0] + dims[1]], m[:, dims[0] + dims[1]:]]
        splits[name] = Split(name, domain, labeled, ids, x, y, *lat)
    return DatasetBundle(**splits, **specs)


def class_histogram(y: Iterable[int], n_classes: int) -> np.ndarray:
    return np.bincount(np.asarray(list(y) if not isinstance(y, np.ndarray) else y, dtype=np.int64),
                       minlength=n_classes)
