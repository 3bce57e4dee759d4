"""Experiment drivers shared by the CLI and the acceptance suite.

Each driver returns plain rows (lists) in a fixed order so reports are
byte-reproducible whatever the worker count.
"""
import os
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass

import numpy as np
from scipy import stats

from .fields import (DDIM, EULER, HEUN, AnalyticGaussianField, DDIMAnalyticPredictor, make_step_rule)
from .metrics import region_report
from .samplers import AT_PREV, AT_TARGET
from .tensor_core import make_rng, uniform_grid
from .training import N_CLASSES, TrainConfig, color_channel, gen_shapes_dataset, train
from .uni_edit import (EditConfig, baseline_delayed_injection, baseline_latent_fusion, uni_edit)
from .uni_inv import UNI_INV, local_error_study, octave_dts, reconstruct

CONVERGE_COLUMNS = ["method", "rule", "dt", "error"]
RECON_COLUMNS = ["setting", "image", "method", "mse", "psnr", "ssim", "nfe"]
ABLATE_COLUMNS = ["alpha", "omega", "bg_psnr", "bg_ssim", "edit_score", "nfe"]

SHAPES_N_DATA = 2000
SHAPES_DATA_SEED = 7
HELDOUT_SEED = 1234
SHAPES_TRAIN = TrainConfig(lr=1e-3, batch_size=64, steps=10000, seed=7, ema=0.999, precision="float32")

DEFAULT_ALPHAS = (0.2, 0.4, 0.6, 0.8, 1.0)
DEFAULT_OMEGAS = (1.0, 3.0, 5.0, 8.0)


def n_workers():
    try:
        return max(1, int(os.environ.get("FLOWINV_THREADS", "1")))
    except ValueError:
        return 1


def ordered_map(fn, items, workers=None):
    """``map`` that may run in threads but always returns results in input order."""
    workers = n_workers() if workers is None else workers
    items = list(items)
    if workers <= 1 or len(items) <= 1:
        return [fn(x) for x in items]
    with ThreadPoolExecutor(max_workers=workers) as ex:
        return list(ex.map(fn, items))


def train_shapes(config=SHAPES_TRAIN, n_data=SHAPES_N_DATA, data_seed=SHAPES_DATA_SEED, log_every=0, log=None):
    """The reference shapes field used by the benchmarks."""
    return train(gen_shapes_dataset(n_data, data_seed), config, log_every=log_every, log=log)


# convergence ---------------------------------------------------------------

def convergence_study(rule="euler", dt_min=2.0 ** -8, dt_max=2.0 ** -3, t_i=0.75, sigma0=1.0, mu0=0.0, z=1.0):
    """Local-error study of every inverter on the analytic field at ``t_i``.

    ``z`` is the data-time value whose exact trajectory supplies the start state.
    """
    field = AnalyticGaussianField(mu0, sigma0)
    z_start = field.flow_map(np.full((1, 1, 1), float(z)), t_i)
    dts = octave_dts(dt_min, dt_max)
    return {m: local_error_study(rule, field, z_start, dts, t_i=t_i, method=m) for m in (UNI_INV, AT_PREV, AT_TARGET)}


def convergence_rows(studies):
    rows = []
    for m, s in studies.items():
        rows.extend([m, s.kind, dt, err] for dt, err in s.rows())
    return rows


# reconstruction --------------------------------------------------------------

@dataclass(frozen=True)
class ReconMethod:
    name: str
    rule: str
    inverter: str
    twice_forward: bool = False


RECON_METHODS = (
    ReconMethod("euler_at_prev", EULER, AT_PREV),
    ReconMethod("euler_at_target", EULER, AT_TARGET),
    ReconMethod("heun_at_prev", HEUN, AT_PREV, True),
    ReconMethod("uni_inv", EULER, UNI_INV),
    ReconMethod("uni_inv_heun", HEUN, UNI_INV, True),
)
DDIM_METHODS = (
    ReconMethod("ddim_at_prev", DDIM, AT_PREV),
    ReconMethod("uni_inv_ddim", DDIM, UNI_INV),
)


def method_steps(method, n_steps):
    """Matched budget: once-forward methods get N steps, twice-forward N/2."""
    return max(1, n_steps // 2) if method.twice_forward else n_steps


def reconstruction_rows(field, images, conditions, n_steps, setting, methods=RECON_METHODS):
    """Per-image rows ``setting, image, method, mse, psnr, ssim, nfe`` (inversion NFE)."""
    rules = {m.name: make_step_rule(m.rule, field, uniform_grid(method_steps(m, n_steps))) for m in methods}

    def run(k):
        out = []
        for m in methods:
            _, met = reconstruct(rules[m.name], images[k], conditions[k], m.inverter)
            out.append([setting, k, m.name, met["mse"], met["psnr"], met.get("ssim", float("nan")), met["nfe_inv"]])
        return out

    return [r for rows in ordered_map(run, range(len(images))) for r in rows]


def ddim_reconstruction_rows(shape, n_images, n_steps, seed, sigma0=1.0):
    """DDIM rows use the exact noise predictor on Gaussian data of the given shape."""
    pred = DDIMAnalyticPredictor(sigma0)
    rng = make_rng(seed)
    images = [pred.sample_data(rng, shape) for _ in range(n_images)]
    return reconstruction_rows(pred, images, [None] * n_images, n_steps, "ddim_analytic", DDIM_METHODS)


def summarize(rows, key_cols=("setting", "method"), value_cols=("mse", "psnr", "ssim", "nfe")):
    """Mean of ``value_cols`` per key, preserving first-appearance order."""
    idx = {c: i for i, c in enumerate(RECON_COLUMNS)}
    groups = {}
    for r in rows:
        groups.setdefault(tuple(r[idx[c]] for c in key_cols), []).append(r)
    out = []
    for key, rs in groups.items():
        out.append(list(key) + [float(np.mean([r[idx[c]] for r in rs])) for c in value_cols])
    return out


def win_fraction(rows, setting, method="uni_inv", rivals=("euler_at_prev", "euler_at_target")):
    """Fraction of images where ``method`` has strictly lower MSE than every rival."""
    by_img = {}
    for s, k, m, err, *_ in rows:
        if s == setting:
            by_img.setdefault(k, {})[m] = err
    wins = [d[method] < min(d[r] for r in rivals) for d in by_img.values()]
    return float(np.mean(wins)) if wins else float("nan")


# editing ---------------------------------------------------------------------

@dataclass
class EditCase:
    image: np.ndarray
    region: np.ndarray
    source: int
    target: int


def color_edit_cases(n, seed):
    """Held-out recolour edits: same shape, color shifted to the next color."""
    cases = []
    for s in gen_shapes_dataset(n, seed):
        tgt = (s.condition // 3) * 3 + (s.condition % 3 + 1) % 3
        cases.append(EditCase(s.image, s.region_mask, s.condition, tgt))
    return cases


EDIT_METHODS = ("uni_edit", "delayed", "latent_fusion")


def run_edit(field, case, n_steps, alpha, omega, method="uni_edit"):
    """Returns ``(edited, RegionReport, nfe, trace_or_None)``."""
    cfg = EditConfig(omega=omega, alpha=alpha, n_steps=n_steps, source=case.source, target=case.target)
    n0 = field.nfe()
    trace = None
    if method == "uni_edit":
        trace = uni_edit(field, case.image, cfg)
        out = trace.final
    elif method == "delayed":
        out = baseline_delayed_injection(field, case.image, cfg)
    elif method == "latent_fusion":
        out = baseline_latent_fusion(field, case.image, cfg).final
    else:
        raise ValueError(f"unknown edit method {method!r}")
    rep = region_report(case.image, out, case.region, color_channel(case.source), color_channel(case.target))
    return out, rep, field.nfe() - n0, trace


def mask_inside_outside(trace, region):
    """Mean guidance mask inside and outside ``region``, averaged over steps."""
    region = np.asarray(region, dtype=bool)
    inside = np.mean([m[region].mean() for m in trace.masks()])
    outside = np.mean([m[~region].mean() for m in trace.masks()])
    return float(inside), float(outside)


def ablation(field, cases, n_steps=15, alphas=DEFAULT_ALPHAS, omegas=DEFAULT_OMEGAS):
    """Per-case reports over the (alpha, omega) grid.

    Returns ``{(alpha, omega): [RegionReport per case]}`` and the NFE per cell.
    """
    reports, nfes = {}, {}
    for omega in omegas:
        for alpha in alphas:
            res = ordered_map(lambda c: run_edit(field, c, n_steps, alpha, omega), cases)
            reports[(alpha, omega)] = [r[1] for r in res]
            nfes[(alpha, omega)] = res[0][2]
    return reports, nfes


def ablation_rows(reports, nfes):
    rows = []
    for (alpha, omega), reps in reports.items():
        rows.append([alpha, omega,
                     float(np.mean([r.bg_psnr for r in reps])),
                     float(np.mean([r.bg_ssim for r in reps])),
                     float(np.mean([r.edit_score for r in reps])),
                     nfes[(alpha, omega)]])
    return rows


@dataclass
class TrendTest:
    metric: str
    direction: int
    n_agree: int
    n_disagree: int
    p_value: float
    means: list

    @property
    def passed(self):
        return self.p_value < 0.05


def trend_sign_test(per_case, alphas, direction, metric=""):
    """Spearman rho of metric vs alpha per case, then a one-sided binomial sign
    test that rho has sign ``direction`` (+1 rising, -1 falling); zero rhos are dropped.

    ``per_case`` is ``[n_cases, n_alphas]``.
    """
    per_case = np.asarray(per_case, dtype=np.float64)
    rhos = []
    for row in per_case:
        if np.ptp(row) == 0:
            rhos.append(0.0)
            continue
        rhos.append(stats.spearmanr(alphas, row)[0])
    rhos = np.nan_to_num(np.asarray(rhos))
    agree = int(np.sum(np.sign(rhos) == direction))
    disagree = int(np.sum(np.sign(rhos) == -direction))
    n = agree + disagree
    p = stats.binomtest(agree, n, 0.5, alternative="greater").pvalue if n else 1.0
    return TrendTest(metric, direction, agree, disagree, float(p), per_case.mean(axis=0).tolist())


def alpha_trade_off(reports, alphas, omega):
    """Sign tests: background PSNR falls and edit score rises with alpha."""
    psnr = np.array([[r.bg_psnr for r in reports[(a, omega)]] for a in alphas]).T
    score = np.array([[r.edit_score for r in reports[(a, omega)]] for a in alphas]).T
    return (trend_sign_test(psnr, alphas, -1, "bg_psnr"), trend_sign_test(score, alphas, +1, "edit_score"))


def null_token_for(field):
    return None if getattr(field, "accepts_null", True) else 0


__all__ = [n for n in dir() if not n.startswith("_")] + ["N_CLASSES"]
