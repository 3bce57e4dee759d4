"""``flowinv`` command line.

Every subcommand resolves its configuration as defaults, then an optional
``--config`` file of ``key = value`` lines, then explicit flags. The
resolved config is written into every artifact. Exit codes: 0 ok, 1 usage
or config error, 2 numeric failure, 3 acceptance-gate failure.
"""
import argparse
import json
import math
import os
import re
import sys

import numpy as np

from . import bench, io
from .fields import EULER, HEUN, make_step_rule
from .metrics import region_report
from .samplers import sample
from .tensor_core import NonFiniteError, child_seed, make_rng, uniform_grid
from .training import (IMAGE_SHAPE, TrainConfig, TrainingDiverged, color_channel, gen_shapes_dataset,
                       gen_two_gaussians, parse_token, token_name, train)
from .uni_edit import EditConfig
from .uni_inv import METHODS, UNI_INV, get_inverter

EXIT_OK, EXIT_USAGE, EXIT_NUMERIC, EXIT_GATE = 0, 1, 2, 3

CONVERGE_GATE = 2.5


class UsageError(Exception):
    pass


def parse_number(text):
    """Floats, plus ``a^b`` powers such as ``2^-8``."""
    s = str(text).strip()
    m = re.fullmatch(r"([0-9.eE+-]+)\^([0-9.eE+-]+)", s)
    if m:
        return float(m.group(1)) ** float(m.group(2))
    return float(s)


def parse_floats(text):
    if isinstance(text, (list, tuple)):
        return [float(x) for x in text]
    return [parse_number(x) for x in str(text).split(",") if x.strip()]


def _bool(text):
    if isinstance(text, bool):
        return text
    s = str(text).strip().lower()
    if s in ("1", "true", "yes", "on"):
        return True
    if s in ("0", "false", "no", "off"):
        return False
    raise ValueError(f"not a boolean: {text!r}")


# option name -> (type, default, help); shared names mean the same thing everywhere
OPTIONS = {
    "out": (str, ".", "output directory"),
    "seed": (int, bench.SHAPES_TRAIN.seed, "run seed"),
    "model": (str, None, "checkpoint path"),
    "dataset": (str, "shapes", "shapes or gaussians"),
    "n_data": (int, 2000, "training set size"),
    "data_seed": (int, bench.SHAPES_DATA_SEED, "seed of the generated training set"),
    "steps": (int, 10000, "training steps"),
    "lr": (float, 1e-3, "peak learning rate"),
    "batch_size": (int, 64, "minibatch size"),
    "ema": (float, 0.999, "weight EMA decay (0 disables)"),
    "precision": (str, "float32", "float32 or float64 training arithmetic"),
    "lr_schedule": (str, "cosine", "cosine or constant"),
    "cond_dropout": (float, 0.1, "probability of training with the NULL condition"),
    "log_every": (int, 0, "print mean loss every this many steps"),
    "n_steps": (int, 50, "sampler steps N"),
    "rule": (str, EULER, "euler, heun or ddim"),
    "condition": (str, "null", "condition token, e.g. red_circle, or null"),
    "n": (int, 4, "number of samples"),
    "method": (str, UNI_INV, "inverter: uni_inv, at_prev or at_target"),
    "image": (str, None, "input PPM; otherwise a held-out generated image"),
    "index": (int, 0, "held-out image index"),
    "heldout_seed": (int, bench.HELDOUT_SEED, "seed of the held-out image set"),
    "n_images": (int, 50, "number of held-out images"),
    "alpha": (float, 0.6, "delay rate"),
    "omega": (float, 5.0, "guidance strength"),
    "source": (str, None, "source condition (defaults to the image's own class)"),
    "target": (str, None, "target condition"),
    "baseline": (str, None, "delayed, direct or fusion instead of the main editor"),
    "t_i": (float, 0.75, "interior time of the local-error study"),
    "dt_min": (parse_number, 2.0 ** -8, "smallest step (accepts 2^-8)"),
    "dt_max": (parse_number, 2.0 ** -3, "largest step"),
    "sigma": (float, 1.0, "data standard deviation of the analytic field"),
    "mu": (float, 0.0, "data mean of the analytic field"),
    "z": (float, 1.0, "data value whose exact trajectory seeds the study"),
    "alphas": (parse_floats, list(bench.DEFAULT_ALPHAS), "comma list of delay rates"),
    "omegas": (parse_floats, list(bench.DEFAULT_OMEGAS), "comma list of guidance strengths"),
    "n_cases": (int, 50, "number of edit cases"),
    "gate_omega": (float, 5.0, "omega whose alpha curve is sign-tested"),
    "ddim": (_bool, True, "include the analytic DDIM rows"),
    "input": (str, ".", "directory holding CSV outputs to summarize"),
}

COMMANDS = {
    "train": ("train a velocity field; writes model.ckpt and loss.csv",
              ["out", "seed", "dataset", "n_data", "data_seed", "steps", "lr", "batch_size", "ema", "precision",
               "lr_schedule", "cond_dropout", "log_every"]),
    "sample": ("draw samples from a checkpoint",
               ["out", "seed", "model", "n_steps", "rule", "condition", "n"]),
    "invert": ("invert one image to noise",
               ["out", "seed", "model", "n_steps", "rule", "method", "condition", "image", "index", "heldout_seed",
                "alpha"]),
    "reconstruct": ("inversion + regeneration benchmark over held-out images",
                    ["out", "seed", "model", "n_steps", "n_images", "heldout_seed", "ddim"]),
    "edit": ("edit one held-out image toward a target condition",
             ["out", "seed", "model", "n_steps", "alpha", "omega", "source", "target", "baseline", "image", "index",
              "heldout_seed"]),
    "converge": ("local-error order of every inverter on the analytic field",
                 ["out", "rule", "t_i", "dt_min", "dt_max", "sigma", "mu", "z"]),
    "ablate": ("sweep delay rate and guidance strength over edit cases",
               ["out", "seed", "model", "n_steps", "alphas", "omegas", "n_cases", "heldout_seed", "gate_omega"]),
    "report": ("collect CSV outputs of a directory into report.md",
               ["out", "input"]),
}

# per-command overrides of the shared defaults
COMMAND_DEFAULTS = {
    "edit": {"n_steps": 15},
    "ablate": {"n_steps": 15},
}


def read_config_file(path):
    """``key = value`` lines; ``#`` starts a comment; dashes in keys are underscores."""
    out = {}
    try:
        with open(path) as f:
            lines = f.readlines()
    except OSError as exc:
        raise UsageError(f"cannot read config file {path}: {exc.strerror}") from None
    for lineno, line in enumerate(lines, 1):
        line = line.split("#", 1)[0].strip()
        if not line:
            continue
        if "=" not in line:
            raise UsageError(f"{path}:{lineno}: expected key = value")
        k, v = (s.strip() for s in line.split("=", 1))
        out[k.replace("-", "_")] = v
    return out


def resolve_config(command, flags, config_path=None):
    """Defaults < config file < flags; every value converted to its declared type."""
    names = COMMANDS[command][1]
    cfg = {n: OPTIONS[n][1] for n in names}
    cfg.update({k: v for k, v in COMMAND_DEFAULTS.get(command, {}).items()})
    layers = []
    if config_path:
        layers.append(("config file", read_config_file(config_path)))
    layers.append(("flags", {k: v for k, v in flags.items() if v is not None}))
    for origin, layer in layers:
        for k, v in layer.items():
            if k not in cfg:
                raise UsageError(f"unknown option {k!r} for '{command}' (from {origin})")
            conv = OPTIONS[k][0]
            try:
                cfg[k] = v if v is None else conv(v)
            except (TypeError, ValueError):
                raise UsageError(f"bad value {v!r} for option {k!r}") from None
    return cfg


def build_parser():
    p = argparse.ArgumentParser(prog="flowinv", description=__doc__.split("\n")[0])
    sub = p.add_subparsers(dest="command", metavar="command")
    for name, (helptext, opts) in COMMANDS.items():
        sp = sub.add_parser(name, help=helptext, description=helptext)
        sp.add_argument("--config", help="key = value file (flags override it)")
        for o in opts:
            _, default, h = OPTIONS[o]
            d = COMMAND_DEFAULTS.get(name, {}).get(o, default)
            # values stay as strings here so the file and flags share one conversion path
            sp.add_argument("--" + o.replace("_", "-"), dest=o, default=None, help=f"{h} (default {d})")
    return p


# helpers ----------------------------------------------------------------------

def _outdir(cfg):
    d = cfg["out"]
    try:
        os.makedirs(d, exist_ok=True)
    except OSError as exc:
        raise UsageError(f"cannot create output directory {d}: {exc.strerror}") from None
    return d


def _path(cfg, name):
    return os.path.join(cfg["out"], name)


def _load_model(cfg):
    path = cfg.get("model")
    if not path:
        raise UsageError("--model is required")
    if not os.path.exists(path):
        raise UsageError(f"checkpoint not found: {path}")
    try:
        field, _ = io.load_checkpoint(path)
    except io.CheckpointError as exc:
        raise UsageError(f"bad checkpoint {path}: {exc}") from None
    return field


def _token(field, name):
    try:
        tok = parse_token(name)
    except ValueError as exc:
        raise UsageError(str(exc)) from None
    try:
        field.check_condition(tok)
    except ValueError as exc:
        raise UsageError(str(exc)) from None
    return tok


def _heldout(cfg, n=None):
    return gen_shapes_dataset(cfg["n_images"] if n is None else n, cfg["heldout_seed"])


def _input_image(cfg, field):
    """``(image, region or None, own condition or None)``."""
    if cfg.get("image"):
        img = io.read_pnm(cfg["image"])
        if img.shape != tuple(field.shape):
            raise UsageError(f"image shape {img.shape} does not match the model {tuple(field.shape)}")
        return img, None, None
    case = gen_shapes_dataset(cfg["index"] + 1, cfg["heldout_seed"])[cfg["index"]]
    return case.image, case.region_mask, case.condition


def _write_json(path, obj):
    with open(path, "w") as f:
        f.write(json.dumps(obj, indent=2, sort_keys=True) + "\n")


def _prov(cfg):
    """Resolved config as echoed into artifacts; the output directory is left
    out so identical runs into different directories give identical files."""
    return {k: v for k, v in cfg.items() if k != "out"}


def _comment(cfg):
    return "config: " + json.dumps(_prov(cfg), sort_keys=True)


# commands -----------------------------------------------------------------------

def cmd_train(cfg):
    _outdir(cfg)
    if cfg["dataset"] == "shapes":
        data = gen_shapes_dataset(cfg["n_data"], cfg["data_seed"])
    elif cfg["dataset"] == "gaussians":
        data = gen_two_gaussians(cfg["n_data"], cfg["data_seed"])
    else:
        raise UsageError(f"unknown dataset {cfg['dataset']!r}")
    try:
        tc = TrainConfig(lr=cfg["lr"], batch_size=cfg["batch_size"], steps=cfg["steps"], seed=cfg["seed"],
                         cond_dropout=cfg["cond_dropout"], lr_schedule=cfg["lr_schedule"], ema=cfg["ema"],
                         precision=cfg["precision"])
    except ValueError as exc:
        raise UsageError(str(exc)) from None
    log = (lambda m: print(m, flush=True)) if cfg["log_every"] else None
    field = train(data, tc, log_every=cfg["log_every"], log=log)
    io.save_checkpoint(_path(cfg, "model.ckpt"), field, train_config=_prov(cfg), seed=cfg["seed"])
    io.write_csv(_path(cfg, "loss.csv"), ["step", "loss"], list(enumerate(field.loss_history)), _prov(cfg))
    last = field.loss_history[-1] if field.loss_history else float("nan")
    print(f"wrote {_path(cfg, 'model.ckpt')} ({cfg['steps']} steps, final loss {last:.4f})")
    return EXIT_OK


def cmd_sample(cfg):
    field = _load_model(cfg)
    _outdir(cfg)
    tok = _token(field, cfg["condition"])
    rule = make_step_rule(cfg["rule"], field, uniform_grid(cfg["n_steps"]))
    meta = []
    for k in range(cfg["n"]):
        noise = make_rng(child_seed(cfg["seed"], k)).standard_normal(field.shape)
        traj = sample(rule, noise, tok)
        name = f"sample_{k:03d}.ppm"
        io.write_ppm(_path(cfg, name), traj.end, [_comment(cfg)])
        meta.append({"file": name, "nfe": traj.nfe, "min": float(traj.end.min()), "max": float(traj.end.max())})
    _write_json(_path(cfg, "samples.json"), {"config": _prov(cfg), "samples": meta})
    print(f"wrote {cfg['n']} samples to {cfg['out']}")
    return EXIT_OK


def cmd_invert(cfg):
    field = _load_model(cfg)
    _outdir(cfg)
    tok = _token(field, cfg["condition"])
    if cfg["method"] not in METHODS:
        raise UsageError(f"unknown method {cfg['method']!r}")
    img, _, _ = _input_image(cfg, field)
    rule = make_step_rule(cfg["rule"], field, uniform_grid(cfg["n_steps"], cfg["alpha"]))
    inv = get_inverter(cfg["method"])(rule, img, tok)
    np.save(_path(cfg, "latent.npy"), inv.end)
    _write_json(_path(cfg, "invert.json"), {"config": _prov(cfg), "nfe": inv.nfe, "t_end": inv.times[-1],
                                              "latent_std": float(inv.end.std())})
    print(f"inverted to t={inv.times[-1]} with {inv.nfe} evaluations")
    return EXIT_OK


def cmd_reconstruct(cfg):
    field = _load_model(cfg)
    _outdir(cfg)
    held = _heldout(cfg)
    images = [s.image for s in held]
    rows = bench.reconstruction_rows(field, images, [s.condition for s in held], cfg["n_steps"], "conditional")
    rows += bench.reconstruction_rows(field, images, [None] * len(held), cfg["n_steps"], "unconditional")
    if cfg["ddim"]:
        rows += bench.ddim_reconstruction_rows(IMAGE_SHAPE, len(held), cfg["n_steps"], cfg["seed"])
    io.write_csv(_path(cfg, "reconstruct.csv"), bench.RECON_COLUMNS, rows, _prov(cfg))
    summary = bench.summarize(rows)
    io.write_csv(_path(cfg, "reconstruct_summary.csv"), ["setting", "method", "mse", "psnr", "ssim", "nfe"],
                 summary, _prov(cfg))
    print(f"{'setting':<14} {'method':<16} {'mse':>11} {'psnr':>7} {'ssim':>7} {'nfe':>5}")
    for s, m, err, p, q, n in summary:
        print(f"{s:<14} {m:<16} {err:11.4e} {p:7.2f} {q:7.4f} {n:5.0f}")
    for setting in ("conditional", "unconditional"):
        print(f"uni_inv beats both vanilla modes on {bench.win_fraction(rows, setting):.0%} of {setting} images")
    return EXIT_OK


def cmd_edit(cfg):
    field = _load_model(cfg)
    _outdir(cfg)
    img, region, own = _input_image(cfg, field)
    if cfg["source"] is None and own is None:
        raise UsageError("--source is required with --image")
    src = own if cfg["source"] is None else _token(field, cfg["source"])
    if cfg["target"] is None:
        raise UsageError("--target is required")
    tgt = _token(field, cfg["target"])
    try:
        ecfg = EditConfig(omega=cfg["omega"], alpha=cfg["alpha"], n_steps=cfg["n_steps"], source=src, target=tgt)
    except ValueError as exc:
        raise UsageError(str(exc)) from None
    baseline = cfg["baseline"]
    case = bench.EditCase(img, region, src, tgt)
    comments = [_comment(cfg)]
    n0 = field.nfe()
    if baseline is None:
        from .uni_edit import uni_edit
        trace = uni_edit(field, img, ecfg)
        out = trace.final
        for k, m in enumerate(trace.masks()):
            io.write_pgm(_path(cfg, f"mask_{k:03d}.pgm"), m, comments + [f"t={trace.steps[k].t!r}"])
        record = trace.summary()
    elif baseline in ("delayed", "direct", "fusion"):
        from .uni_edit import baseline_delayed_injection, baseline_direct_edit, baseline_latent_fusion
        if baseline == "delayed":
            out = baseline_delayed_injection(field, img, ecfg)
        elif baseline == "direct":
            out = baseline_direct_edit(field, img, ecfg.n_steps, src, tgt)
        else:
            out = baseline_latent_fusion(field, img, ecfg).final
        record = {"baseline": baseline}
    else:
        raise UsageError(f"unknown baseline {baseline!r}")
    record["nfe"] = field.nfe() - n0
    record["config"] = _prov(cfg)
    record["source"] = token_name(src)
    record["target"] = token_name(tgt)
    io.write_ppm(_path(cfg, "edited.ppm"), out, comments)
    io.write_ppm(_path(cfg, "input.ppm"), img, comments)
    np.save(_path(cfg, "edited.npy"), out)
    _write_json(_path(cfg, "edit_trace.json"), record)
    if case.region is not None:
        rep = region_report(img, out, case.region, color_channel(src), color_channel(tgt))
        io.write_csv(_path(cfg, "region_report.csv"), rep.columns(), [rep.row()], _prov(cfg))
        print(f"bg_psnr {rep.bg_psnr:.2f} dB  bg_ssim {rep.bg_ssim:.4f}  edit_score {rep.edit_score:.4f}")
    print(f"{token_name(src)} -> {token_name(tgt)}: {record['nfe']} evaluations")
    return EXIT_OK


def cmd_converge(cfg):
    _outdir(cfg)
    if cfg["rule"] not in (EULER, HEUN):
        raise UsageError("converge supports the euler and heun rules")
    try:
        studies = bench.convergence_study(cfg["rule"], cfg["dt_min"], cfg["dt_max"], cfg["t_i"], cfg["sigma"],
                                          cfg["mu"], cfg["z"])
    except ValueError as exc:
        raise UsageError(str(exc)) from None
    io.write_csv(_path(cfg, "converge.csv"), bench.CONVERGE_COLUMNS, bench.convergence_rows(studies), _prov(cfg))
    slopes = {m: s.slope for m, s in studies.items()}
    _write_json(_path(cfg, "converge_slopes.json"), {"config": _prov(cfg), "slopes": slopes,
                                                      "exact": {m: s.exact for m, s in studies.items()}})
    io.write_svg(_path(cfg, "converge.svg"), [(m, s.dts, s.errors) for m, s in studies.items()],
                 title=f"local inversion error ({cfg['rule']})", xlabel="dt", ylabel="error", logx=True, logy=True,
                 comment=_comment(cfg))
    for m, s in studies.items():
        print(f"{m:<10} slope {'exact' if s.exact else f'{s.slope:.3f}'}")
    uni = studies[UNI_INV]
    if not uni.exact and uni.slope < CONVERGE_GATE:
        print(f"gate failed: uni_inv slope {uni.slope:.3f} < {CONVERGE_GATE}", file=sys.stderr)
        return EXIT_GATE
    return EXIT_OK


def cmd_ablate(cfg):
    field = _load_model(cfg)
    _outdir(cfg)
    cases = bench.color_edit_cases(cfg["n_cases"], cfg["heldout_seed"])
    alphas, omegas = cfg["alphas"], cfg["omegas"]
    try:
        reports, nfes = bench.ablation(field, cases, cfg["n_steps"], alphas, omegas)
    except ValueError as exc:
        raise UsageError(str(exc)) from None
    rows = bench.ablation_rows(reports, nfes)
    io.write_csv(_path(cfg, "ablate.csv"), bench.ABLATE_COLUMNS, rows, _prov(cfg))
    by = {(r[0], r[1]): r for r in rows}
    io.write_svg(_path(cfg, "ablate_alpha.svg"),
                 [(f"bg_psnr w={w:g}", alphas, [by[(a, w)][2] for a in alphas]) for w in omegas],
                 title="background PSNR vs delay rate", xlabel="alpha", ylabel="dB", comment=_comment(cfg))
    io.write_svg(_path(cfg, "ablate_score.svg"),
                 [(f"edit w={w:g}", alphas, [by[(a, w)][4] for a in alphas]) for w in omegas],
                 title="edit score vs delay rate", xlabel="alpha", ylabel="score", comment=_comment(cfg))
    gate_w = cfg["gate_omega"] if cfg["gate_omega"] in omegas else omegas[0]
    tests = bench.alpha_trade_off(reports, alphas, gate_w) if len(alphas) >= 3 else ()
    _write_json(_path(cfg, "ablate_tests.json"), {
        "config": _prov(cfg), "omega": gate_w,
        "tests": [{"metric": t.metric, "direction": t.direction, "agree": t.n_agree, "disagree": t.n_disagree,
                   "p_value": t.p_value, "means": t.means, "passed": t.passed} for t in tests]})
    for r in rows:
        print(f"alpha {r[0]:.2f} omega {r[1]:g}: bg_psnr {r[2]:.2f} bg_ssim {r[3]:.4f} edit {r[4]:.4f} nfe {r[5]}")
    failed = [t for t in tests if not t.passed]
    for t in tests:
        print(f"sign test {t.metric}: {t.n_agree} agree / {t.n_disagree} disagree, p={t.p_value:.3g}")
    if failed:
        print("gate failed: alpha trade-off not monotone for " + ", ".join(t.metric for t in failed), file=sys.stderr)
        return EXIT_GATE
    return EXIT_OK


REPORT_FILES = ("converge.csv", "reconstruct_summary.csv", "ablate.csv", "region_report.csv")


def _md_table(rows):
    if not rows:
        return "(empty)\n"
    cols = list(rows[0].keys())
    out = ["| " + " | ".join(cols) + " |", "|" + "---|" * len(cols)]
    for r in rows:
        out.append("| " + " | ".join(_short(r[c]) for c in cols) + " |")
    return "\n".join(out) + "\n"


def _short(v):
    try:
        x = float(v)
    except ValueError:
        return v
    if x.is_integer() and "." not in v and "e" not in v:
        return v
    return f"{x:.4g}"


def cmd_report(cfg):
    _outdir(cfg)
    src = cfg["input"]
    parts = ["# flowinv report\n"]
    found = 0
    loss_path = os.path.join(src, "loss.csv")
    if os.path.exists(loss_path):
        found += 1
        rows = io.read_csv(loss_path)
        steps = [int(r["step"]) for r in rows]
        loss = [float(r["loss"]) for r in rows]
        io.write_svg(_path(cfg, "loss.svg"), [("loss", steps, loss)], title="training loss", xlabel="step",
                     ylabel="loss", logy=True)
        tail = loss[-min(100, len(loss)):] if loss else [math.nan]
        parts.append(f"## loss.csv\n\n{len(loss)} steps, mean of the last {len(tail)}: {np.mean(tail):.4f}\n")
    for name in REPORT_FILES:
        p = os.path.join(src, name)
        if os.path.exists(p):
            found += 1
            parts.append(f"## {name}\n\n" + _md_table(io.read_csv(p)))
    if not found:
        raise UsageError(f"no known CSV outputs in {src}")
    with open(_path(cfg, "report.md"), "w") as f:
        f.write("\n".join(parts))
    print(f"wrote {_path(cfg, 'report.md')} from {found} files")
    return EXIT_OK


HANDLERS = {
    "train": cmd_train, "sample": cmd_sample, "invert": cmd_invert, "reconstruct": cmd_reconstruct,
    "edit": cmd_edit, "converge": cmd_converge, "ablate": cmd_ablate, "report": cmd_report,
}


def main(argv=None):
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as exc:
        return EXIT_OK if exc.code == 0 else EXIT_USAGE
    if not args.command:
        parser.print_usage(sys.stderr)
        return EXIT_USAGE
    flags = {k: v for k, v in vars(args).items() if k not in ("command", "config")}
    try:
        cfg = resolve_config(args.command, flags, args.config)
        return HANDLERS[args.command](cfg)
    except UsageError as exc:
        print(f"flowinv {args.command}: {exc}", file=sys.stderr)
        return EXIT_USAGE
    except (NonFiniteError, TrainingDiverged, FloatingPointError) as exc:
        print(f"flowinv {args.command}: numeric failure: {exc}", file=sys.stderr)
        return EXIT_NUMERIC


if __name__ == "__main__":
    sys.exit(main())
