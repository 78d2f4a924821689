"""Per-scene unsupervised fitting of PSNet + IRNet."""

from __future__ import annotations

import contextlib
import logging
import math
import os
import time
from dataclasses import asdict, dataclass, field, replace

import numpy as np

from . import diffcore as dc
from .baseline_ls import prior_normals
from .domain import ImageStack, NormalMap, SceneError, crop_to_bbox, normalize_intensity
from .evaluator import mean_angular_error
from .irnet import IrNetParams, render_all
from .psnet import DEFAULT_PS_CHANNELS, PsNetParams, build_input, psnet_features, psnet_normals

log = logging.getLogger(__name__)

SUPERVISION_MODES = ("early", "none", "all")


@dataclass(frozen=True)
class TrainConfig:
    total_iters: int = 1000
    lr: float = 8e-4
    lr_drop_at: int = 900
    lr_drop_factor: float = 0.1
    supervision: str = "early"
    supervision_iters: int = 50
    supervision_weight: float = 0.1
    loss_dropout_rate: float = 0.9
    seed: int = 0
    repeat_runs: int = 11
    ps_channels: int = DEFAULT_PS_CHANNELS
    ir_channels: int = 16
    use_specularity: bool = True
    use_global_blend: bool = True
    crop_margin: int = 4
    dtype: str = "float32"
    view: tuple = (0.0, 0.0, 1.0)
    bn_eps: float = 1e-5
    norm_eps: float = 1e-12

    def __post_init__(self):
        if self.total_iters < 0:
            raise ValueError("total_iters must be >= 0")
        if self.supervision == "early" and not 0 <= self.supervision_iters <= self.total_iters:
            raise ValueError("supervision_iters must lie in [0, total_iters]")
        if not 0.0 <= self.loss_dropout_rate < 1.0:
            raise ValueError("loss_dropout_rate must lie in [0, 1)")
        if self.supervision not in SUPERVISION_MODES:
            raise ValueError(f"supervision must be one of {SUPERVISION_MODES}")
        if self.lr <= 0 or self.lr_drop_factor <= 0:
            raise ValueError("learning rate and drop factor must be positive")

    def supervision_lambda(self, t, c):
        """Weight of the prior term at 1-based iteration ``t``."""
        if self.supervision == "none":
            return 0.0
        if self.supervision == "all" or t <= self.supervision_iters:
            return self.supervision_weight * c
        return 0.0

    def step_size(self, t):
        if t <= self.lr_drop_at:
            return self.lr
        return self.lr * self.lr_drop_factor


@dataclass
class TraceRecord:
    t: int
    loss: float
    loss_rec: float
    loss_prior: float
    lam: float
    lr: float
    kept: int
    elements: int
    angular_error: float | None = None


@dataclass
class TrainTrace:
    records: list = field(default_factory=list)

    def __len__(self):
        return len(self.records)

    def append(self, rec):
        if self.records and rec.t <= self.records[-1].t:
            raise ValueError("trace iterations must increase")
        self.records.append(rec)

    def column(self, name):
        return [getattr(r, name) for r in self.records]

    def to_text(self):
        """Whitespace-separated table, one line per iteration."""
        has_err = any(r.angular_error is not None for r in self.records)
        cols = ["iteration", "L_rec", "L_prior", "lambda"] + (["angular_error"] if has_err else [])
        lines = ["# " + " ".join(cols)]
        for r in self.records:
            row = [str(r.t), repr(r.loss_rec), repr(r.loss_prior), repr(r.lam)]
            if has_err:
                row.append("nan" if r.angular_error is None else repr(r.angular_error))
            lines.append(" ".join(row))
        return "\n".join(lines) + "\n"

    @classmethod
    def from_text(cls, text):
        trace = cls()
        for line in text.splitlines():
            if not line.strip() or line.startswith("#"):
                continue
            parts = line.split()
            err = float(parts[4]) if len(parts) > 4 else None
            if err is not None and math.isnan(err):
                err = None
            rec, prior, lam = float(parts[1]), float(parts[2]), float(parts[3])
            trace.append(TraceRecord(int(parts[0]), rec + lam * prior, rec, prior, lam,
                                     float("nan"), 0, 0, err))
        return trace


class TrainingDiverged(RuntimeError):
    def __init__(self, t, trace):
        self.t = t
        self.trace = trace
        super().__init__(f"non-finite loss at iteration {t}")


@dataclass
class Networks:
    psnet: PsNetParams
    irnet: IrNetParams

    def parameters(self):
        return self.psnet.parameters() + self.irnet.parameters()


@dataclass
class Prepared:
    """Cropped, normalized scene ready for training."""

    images: np.ndarray  # (M, C, h, w) normalized
    mask: np.ndarray  # (h, w) bool
    lights: object
    crop: object
    sigma: float
    c: float
    prior: np.ndarray  # (3, h, w)
    truth: np.ndarray | None


@dataclass
class TrainResult:
    normals: NormalMap
    reflectance: np.ndarray
    reconstruction: np.ndarray
    observed: np.ndarray
    trace: TrainTrace
    sigma: float
    config: TrainConfig
    runtime: float


@contextlib.contextmanager
def thread_limit(n=None):
    """Cap BLAS threads at ``n`` or ``$PSNIR_THREADS`` when set."""
    if n is None:
        env = os.environ.get("PSNIR_THREADS")
        n = int(env) if env else None
    if n is None:
        yield
        return
    from threadpoolctl import threadpool_limits

    with threadpool_limits(limits=n):
        yield


def prepare(stack, lights, mask, truth=None, margin=4):
    cstack, cmask, crop = crop_to_bbox(stack, mask, margin)
    nstack, sigma = normalize_intensity(cstack, cmask)
    imgs = nstack.images
    m = cmask.mask
    c = float(imgs[:, :, m].mean())
    prior = prior_normals(nstack, lights, cmask).normals
    t = None if truth is None else crop.apply(np.asarray(truth.normals))
    return Prepared(np.asarray(imgs), m, lights, crop, sigma, c, np.asarray(prior), t)


def reconstruction_loss(I_hat, I, mask, keep=None, rescale=1.0):
    """Masked mean absolute error, 1/(M*C*O) * sum O_p |I_hat - I|.

    ``keep`` is an optional 0/1 array over elements (loss dropout); the result is
    multiplied by ``rescale``. Returns a scalar tensor.
    """
    mask = np.asarray(mask, dtype=bool)
    area = int(mask.sum())
    if area == 0:
        raise SceneError("mask is empty")
    if not isinstance(I, dc.Tensor):
        I = dc.Tensor(np.asarray(I, dtype=I_hat.dtype))
    M, C = I_hat.shape[:2]
    weight = np.broadcast_to(mask, I_hat.shape).astype(I_hat.dtype)
    if keep is not None:
        weight = weight * keep
    weight = weight * I_hat.dtype.type(rescale / (M * C * area))
    return dc.total(dc.mul(dc.absolute(dc.sub(I_hat, I)), weight))


def prior_loss(N, N_prior, mask):
    """1/O * sum_p O_p |N_p - N'_p|^2 as a scalar tensor."""
    mask = np.asarray(mask, dtype=bool)
    area = int(mask.sum())
    if area == 0:
        raise SceneError("mask is empty")
    if not isinstance(N_prior, dc.Tensor):
        N_prior = dc.Tensor(np.asarray(N_prior, dtype=N.dtype).reshape(1, 3, *mask.shape))
    weight = (mask / area).astype(N.dtype).reshape(1, 1, *mask.shape)
    return dc.total(dc.mul(dc.square(dc.sub(N, N_prior)), weight))


def init_networks(M, C, config, rng):
    dtype = np.dtype(config.dtype)
    ps = PsNetParams.init(M * C + 1, rng, config.ps_channels, dtype)
    ir = IrNetParams.init(C, config.ps_channels, rng, config.ir_channels, dtype,
                          config.use_specularity, config.use_global_blend)
    return Networks(ps, ir)


def forward(nets, x, images, lights, config):
    phi = psnet_features(x, nets.psnet, config.bn_eps)
    N = psnet_normals(phi, nets.psnet, config.norm_eps)
    I_hat, R = render_all(images, N, phi, lights, nets.irnet, config.view, config.bn_eps)
    return N, I_hat, R


def _angular_error(N, truth, mask):
    if truth is None:
        return None
    return mean_angular_error(N.data[0], truth, mask)


def train_prepared(prep, config, callback=None):
    """Run the optimization loop on a prepared scene.

    ``callback(t, record, nets)`` is invoked after each update when given.
    Returns ``(nets, trace)``.
    """
    dtype = np.dtype(config.dtype)
    init_seq, drop_seq = np.random.SeedSequence(config.seed).spawn(2)
    init_rng = np.random.default_rng(init_seq)
    drop_rng = np.random.default_rng(drop_seq)
    M, C = prep.images.shape[:2]
    nets = init_networks(M, C, config, init_rng)
    params = nets.parameters()
    opt = dc.Adam(params, lr=config.lr)

    x = build_input(prep.images, prep.mask, dtype)
    images = dc.Tensor(prep.images.astype(dtype))
    prior = dc.Tensor(prep.prior.astype(dtype)[None])
    keep_rate = 1.0 - config.loss_dropout_rate
    trace = TrainTrace()

    for t in range(1, config.total_iters + 1):
        lam = config.supervision_lambda(t, prep.c)
        with dc.Tape() as tape:
            N, I_hat, _ = forward(nets, x, images, prep.lights, config)
            keep = None
            if config.loss_dropout_rate > 0:
                keep = (drop_rng.random(I_hat.shape) < keep_rate).astype(dtype)
            l_rec = reconstruction_loss(I_hat, images, prep.mask, keep, 1.0 / keep_rate)
            if lam > 0:
                l_prior = prior_loss(N, prior, prep.mask)
                loss = dc.add(l_rec, dc.scale(l_prior, lam))
                prior_value = l_prior.item()
            else:
                loss = l_rec
                # logged only; kept off the tape so it contributes no gradient
                prior_value = float(np.sum((N.data - prior.data) ** 2 * prep.mask) / prep.mask.sum())
        value = loss.item()
        kept = int(keep.sum()) if keep is not None else int(np.prod(I_hat.shape))
        rec = TraceRecord(t, value, l_rec.item(), prior_value, lam, config.step_size(t),
                          kept, int(np.prod(I_hat.shape)),
                          _angular_error(N, prep.truth, prep.mask))
        trace.append(rec)
        if not math.isfinite(value):
            raise TrainingDiverged(t, trace)
        grads = tape.backward(loss, params)
        opt.lr = config.step_size(t)
        opt.step([grads[id(p)] for p in params])
        if callback is not None:
            callback(t, rec, nets)
    return nets, trace


def train_scene(stack, lights, mask, config=None, truth=None):
    """Fit the networks to one scene and return a :class:`TrainResult`.

    Outputs are re-embedded at the input resolution; reflectance and
    reconstruction stay in normalized intensity units (multiply by
    ``2 * sigma`` to recover input units).
    """
    config = config or TrainConfig()
    start = time.perf_counter()
    with thread_limit():
        prep = prepare(stack, lights, mask, truth, config.crop_margin)
        nets, trace = train_prepared(prep, config)
        dtype = np.dtype(config.dtype)
        x = build_input(prep.images, prep.mask, dtype)
        N, I_hat, R = forward(nets, x, dc.Tensor(prep.images.astype(dtype)), prep.lights, config)
    crop = prep.crop
    return TrainResult(
        normals=NormalMap(crop.embed(N.data[0])),
        reflectance=crop.embed(R.data),
        reconstruction=crop.embed(I_hat.data),
        observed=crop.embed(prep.images),
        trace=trace,
        sigma=prep.sigma,
        config=config,
        runtime=time.perf_counter() - start,
    )


@dataclass
class RunOutcome:
    seed: int
    score: float | None
    final_loss: float | None
    diverged: bool
    result: TrainResult | None = None
    error: str | None = None


@dataclass
class ProtocolSummary:
    median: float | None
    runs: list

    @property
    def scores(self):
        return [r.score for r in self.runs if not r.diverged]

    @property
    def diverged(self):
        return [r.seed for r in self.runs if r.diverged]

    def to_text(self):
        lines = [f"median {self.median!r}"]
        for r in self.runs:
            status = "diverged" if r.diverged else "ok"
            lines.append(f"run seed={r.seed} status={status} score={r.score!r} final_loss={r.final_loss!r}")
        return "\n".join(lines) + "\n"


def run_median_protocol(scene, config=None, runs=None, keep_results=False, trainer=None):
    """Train with seeds ``seed .. seed+R-1`` and report the median score.

    The score is the mean angular error when ``scene.truth`` is present, else the
    final training loss. Diverged runs are reported and excluded from the median.
    """
    config = config or TrainConfig()
    runs = config.repeat_runs if runs is None else runs
    if runs < 1 or runs % 2 == 0:
        raise ValueError("number of runs must be odd")
    trainer = trainer or train_scene
    outcomes = []
    for k in range(runs):
        cfg = replace(config, seed=config.seed + k)
        try:
            res = trainer(scene.stack, scene.lights, scene.mask, cfg, scene.truth)
        except TrainingDiverged as exc:
            log.warning("run with seed %d diverged at iteration %d", cfg.seed, exc.t)
            outcomes.append(RunOutcome(cfg.seed, None, None, True, error=str(exc)))
            continue
        final_loss = res.trace.records[-1].loss if len(res.trace) else None
        if scene.truth is not None:
            score = mean_angular_error(res.normals.normals, scene.truth.normals, scene.mask.mask)
        else:
            score = final_loss
        outcomes.append(RunOutcome(cfg.seed, score, final_loss, False, res if keep_results else None))
    finite = [o.score for o in outcomes if not o.diverged and o.score is not None]
    median = float(np.median(finite)) if finite else None
    return ProtocolSummary(median, outcomes)


def config_dict(config):
    return asdict(config)
