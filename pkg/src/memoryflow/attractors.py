"""Point-cloud diagnostics: semidistances, rate fits, dimension estimates.

Clouds hold flattened state coordinates scaled so that the Euclidean
distance equals the extended norm they were built in (H0 by default).
"""

import math
from dataclasses import dataclass, field

import numpy as np

FIT_FLOOR = 1e-10           # distances below this are floating-point noise
FIT_SKIP_FRACTION = 0.2     # leading transient excluded from rate fits


@dataclass
class PointCloud:
    """Finite set of flattened states with the norm convention recorded."""
    points: np.ndarray
    label: str = ""
    norm: str = "H0"
    layout: object = None          # optional CloudLayout for unflattening

    def __post_init__(self):
        self.points = np.atleast_2d(np.asarray(self.points, dtype=float))
        if self.points.size == 0:
            raise ValueError("cloud must be nonempty")

    @property
    def dim(self):
        return self.points.shape[1]

    def __len__(self):
        return self.points.shape[0]


@dataclass
class CloudLayout:
    """Weights to flatten an extended state into norm-true coordinates."""
    lambdas: np.ndarray
    nodes: np.ndarray
    weights: np.ndarray
    iota: int
    memory_kind: str
    memory_stride: int = 1

    def flatten(self, z):
        lam = self.lambdas
        w_u = lam ** ((self.iota + 1) / 2.0)
        w_v = lam ** (self.iota / 2.0)
        blocks = [w_u * z.u.coeffs, w_v * z.v.coeffs]
        st = self.memory_stride
        vals = z.memory.values[::st]
        w_mem = np.sqrt(self.weights[::st] * st)[:, None] \
            * (lam ** ((self.iota - 1) / 2.0))[None, :]
        blocks.append((w_mem * vals).ravel())
        return np.concatenate(blocks)

    def unflatten(self, x, memory_template):
        from .spaces import ExtendedVector, ModalVector
        lam = self.lambdas
        J = lam.size
        u = x[:J] / lam ** ((self.iota + 1) / 2.0)
        v = x[J:2 * J] / lam ** (self.iota / 2.0)
        mem = memory_template.copy()
        st = self.memory_stride
        w_mem = np.sqrt(self.weights[::st] * st)[:, None] \
            * (lam ** ((self.iota - 1) / 2.0))[None, :]
        vals = x[2 * J:].reshape(-1, J)
        mem.values[:] = 0.0
        mem.values[::st] = np.where(w_mem > 0, vals / np.where(w_mem > 0, w_mem, 1.0), 0.0)
        return ExtendedVector(ModalVector(u, lam), ModalVector(v, lam), mem)


def cloud_from_states(states, label="", iota=0, memory_stride=1):
    """Flatten extended states into a cloud; distances equal extended norms.

    memory_stride thins the memory block (with weight rescaling) to keep
    cloud dimensions manageable for large grids.
    """
    z0 = states[0]
    mem = z0.memory
    layout = CloudLayout(lambdas=z0.u.lambdas, nodes=mem.nodes,
                         weights=mem.weights, iota=iota,
                         memory_kind=mem.kind, memory_stride=memory_stride)
    pts = np.stack([layout.flatten(z) for z in states])
    return PointCloud(pts, label=label, norm="H%d" % iota, layout=layout)


def hausdorff_semidist(b1, b2):
    """sup over b1 of the distance to b2 (asymmetric), exact max-min."""
    if b1.dim != b2.dim:
        raise ValueError("dimension mismatch")
    if b1.norm != b2.norm:
        raise ValueError("norm convention mismatch")
    p1, p2 = b1.points, b2.points
    worst = 0.0
    block = max(1, int(5e6 // max(p2.shape[0] * p2.shape[1], 1)))
    for lo in range(0, p1.shape[0], block):
        diff = p1[lo:lo + block, None, :] - p2[None, :, :]
        d = np.sqrt(np.sum(diff * diff, axis=-1))
        worst = max(worst, float(np.max(np.min(d, axis=1))))
    return worst


@dataclass
class RateFit:
    omega: float
    q: float
    r_squared: float
    n_used: int
    times: np.ndarray = field(default=None, repr=False)
    dists: np.ndarray = field(default=None, repr=False)


def attraction_rate(dist_series):
    """Least-squares fit of log distance against time.

    The first fifth of the samples and all values at the floating-point
    floor are excluded.  Returns the decay rate (negated slope), the
    intercept factor, and the fit quality.
    """
    arr = np.asarray(dist_series, dtype=float)
    if arr.ndim != 2 or arr.shape[1] != 2:
        raise ValueError("expected a sequence of (t, d) pairs")
    t, d = arr[:, 0], arr[:, 1]
    if np.all(d <= FIT_FLOOR):
        raise ValueError("already on attractor")
    skip = int(math.floor(FIT_SKIP_FRACTION * t.size))
    keep = np.arange(t.size) >= skip
    keep &= d > FIT_FLOOR
    if np.count_nonzero(keep) < 5:
        raise ValueError("need at least 5 usable samples above the floor")
    tt, dd = t[keep], np.log(d[keep])
    slope, intercept = np.polyfit(tt, dd, 1)
    pred = slope * tt + intercept
    ss_res = float(np.sum((dd - pred) ** 2))
    ss_tot = float(np.sum((dd - dd.mean()) ** 2))
    r2 = 1.0 - ss_res / ss_tot if ss_tot > 0 else 1.0
    return RateFit(omega=float(-slope), q=float(np.exp(intercept)),
                   r_squared=r2, n_used=int(np.count_nonzero(keep)),
                   times=t[keep], dists=d[keep])


def invariance_residual(e_cloud, stepper, t):
    """Semidistance of the advanced cloud from itself after time t.

    stepper maps a (n, d) array of flattened states to their images; zero
    residual means positive invariance at the sampling resolution.
    """
    advanced = PointCloud(stepper(e_cloud.points, t), label=e_cloud.label,
                          norm=e_cloud.norm, layout=e_cloud.layout)
    return hausdorff_semidist(advanced, e_cloud)


@dataclass
class BoxCountResult:
    dimension: float
    radii: np.ndarray
    counts: np.ndarray


def box_counting_dim(cloud, r_range=None, n_scales=8):
    """Box-occupancy slope of ln N(r) against ln(1/r); an estimate, not a bound.

    Wants at least 100 points and a scale range spanning a decade; a cloud
    that collapses to one point has dimension zero.
    """
    pts = cloud.points
    uniq = np.unique(pts, axis=0)
    if uniq.shape[0] == 1:
        return BoxCountResult(0.0, np.array([]), np.array([]))
    if len(cloud) < 100:
        raise ValueError("need at least 100 points for a dimension estimate")
    if r_range is None:
        span = float(np.max(np.max(pts, axis=0) - np.min(pts, axis=0)))
        r_range = (span / 64.0, span / 4.0)
    r_lo, r_hi = sorted(map(float, r_range))
    if r_hi / r_lo < 10.0 - 1e-9:
        raise ValueError("scale range must span at least one decade")
    radii = np.geomspace(r_hi, r_lo, n_scales)
    origin = np.min(pts, axis=0)
    counts = np.empty(n_scales)
    for i, r in enumerate(radii):
        boxes = np.floor((pts - origin) / r).astype(np.int64)
        counts[i] = np.unique(boxes, axis=0).shape[0]
    slope = np.polyfit(np.log(1.0 / radii), np.log(counts), 1)[0]
    return BoxCountResult(float(slope), radii, counts)


def save_cloud_csv(cloud, path):
    with open(path, "w") as fh:
        fh.write("# label=%s norm=%s\n" % (cloud.label, cloud.norm))
        for row in cloud.points:
            fh.write(",".join("%.17g" % x for x in row) + "\n")


def load_cloud_csv(path, label=None, norm="H0"):
    meta = {}
    with open(path) as fh:
        first = fh.readline()
        if first.startswith("#"):
            meta = dict(item.split("=", 1) for item in first.lstrip("# ").split())
            pts = np.loadtxt(fh, delimiter=",", ndmin=2)
        else:
            fh.seek(0)
            pts = np.loadtxt(fh, delimiter=",", ndmin=2)
    return PointCloud(pts, label=label or meta.get("label", ""),
                      norm=meta.get("norm", norm))
