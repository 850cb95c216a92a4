"""Command-line driver.

Usage::

    tvbilevel COMMAND [--config FILE] [key=value ...]

Configuration is flat ``key = value`` text with dotted section prefixes
(``data.manifest``, ``solver.tol``, ``tr.eta1`` ...); command-line
``key=value`` pairs override the file. Unknown keys are rejected.

Exit codes: 0 success, 1 usage or configuration error, 2 numerical
failure (including failed checks), 3 I/O error.
"""
import argparse
import os
import sys

import numpy as np

from .exceptions import (AssumptionViolated, ConfigError, CorruptFile, InfeasibleDual, InvalidParam,
                         IoFailure, MaxIterations, NonConvergence, ShapeMismatch, SingularSystem,
                         TVBilevelError, UnsupportedFormat)

EXIT_OK, EXIT_USAGE, EXIT_NUMERICAL, EXIT_IO = 0, 1, 2, 3

COMMANDS = ("denoise", "train", "sweep", "gradcheck", "verify", "compare-discretizations")


def _bool(text):
    t = str(text).strip().lower()
    if t in ("1", "true", "yes", "on"):
        return True
    if t in ("0", "false", "no", "off"):
        return False
    raise ValueError(f"not a boolean: {text!r}")


def _floats(text):
    return [float(x) for x in str(text).replace(",", " ").split()]


def _words(text):
    return [x for x in str(text).replace(",", " ").split()]


def _opt_bool(text):
    return None if str(text).strip().lower() in ("auto", "") else _bool(text)


# key -> (parser, default)
SCHEMA = {
    "data.manifest": (str, None),
    "data.input": (str, None),
    "data.clean": (str, None),
    "data.output": (str, None),
    "data.sigma": (float, 0.0),
    "data.seed": (int, 0),
    "data.synthetic_pairs": (int, 0),
    "data.synthetic_shape": (_floats, [128.0, 128.0]),
    "param.kind": (str, "scalar"),
    "param.init": (float, 0.01),
    "param.alpha": (str, None),
    "model.schemes": (_words, ["forward"]),
    "solver.tol": (float, 1e-9),
    "solver.max_iter": (int, 200000),
    "solver.huber_tol": (float, 1e-10),
    "solver.polish": (_opt_bool, None),
    "tr.delta0": (float, 1.0),
    "tr.eta1": (float, 0.1),
    "tr.eta2": (float, 0.75),
    "tr.gamma1": (float, 0.25),
    "tr.gamma2": (float, 0.5),
    "tr.delta_t": (float, 1e-3),
    "tr.tol": (float, 1e-6),
    "tr.max_iter": (int, 200),
    "tr.lbfgs_memory": (int, 10),
    "tr.delta_max": (float, 1e3),
    "tr.huber_gamma": (float, 1e3),
    "tr.grow_factor": (float, 2.0),
    "tr.clear_memory_on_switch": (_bool, False),
    "sweep.grid": (_floats, None),
    "sweep.start": (float, 1e-4),
    "sweep.stop": (float, 0.1),
    "sweep.num": (int, 20),
    "sweep.log": (_bool, True),
    "gradcheck.gammas": (_floats, [10.0, 100.0, 1000.0]),
    "gradcheck.step": (float, 1e-5),
    "gradcheck.threshold": (float, 1e-5),
    "gradcheck.direction": (str, "coordinates"),
    "gradcheck.bouligand": (_bool, True),
    "gradcheck.bouligand_threshold": (float, 1e-4),
    "verify.tol": (float, 1e-5),
    "output.dir": (str, None),
    "run.seed": (int, 0),
    "run.threads": (int, None),
}


def parse_config_text(text, source="<config>"):
    """``{key: raw string}`` from flat ``key = value`` lines."""
    raw = {}
    for lineno, line in enumerate(text.splitlines(), 1):
        line = line.split("#", 1)[0].strip()
        if not line:
            continue
        if "=" not in line:
            raise ConfigError(f"{source}:{lineno}: expected 'key = value'")
        key, value = (s.strip() for s in line.split("=", 1))
        raw[key] = value
    return raw


def resolve_config(raw, base_dir="."):
    """Typed configuration with defaults; unknown keys raise ConfigError."""
    unknown = sorted(set(raw) - set(SCHEMA))
    if unknown:
        raise ConfigError(f"unknown configuration key(s): {', '.join(unknown)}")
    cfg = {}
    for key, (conv, default) in SCHEMA.items():
        if key in raw:
            try:
                cfg[key] = conv(raw[key])
            except ValueError as exc:
                raise ConfigError(f"bad value for {key}: {exc}") from None
        else:
            cfg[key] = default
    for key in ("data.manifest", "data.input", "data.clean", "data.output", "output.dir"):
        if cfg[key] is not None and not os.path.isabs(cfg[key]):
            cfg[key] = os.path.normpath(os.path.join(base_dir, cfg[key]))
    alpha = cfg["param.alpha"]
    if alpha is not None:
        try:
            cfg["param.alpha"] = _floats(alpha)
        except ValueError:
            cfg["param.alpha"] = alpha if os.path.isabs(alpha) else os.path.join(base_dir, alpha)
    return cfg


def load_config(path=None, overrides=()):
    raw, base = {}, os.getcwd()
    if path is not None:
        try:
            with open(path, encoding="utf-8") as fh:
                raw = parse_config_text(fh.read(), path)
        except OSError as exc:
            raise IoFailure(f"cannot read config {path}: {exc}") from exc
        base = os.path.dirname(os.path.abspath(path))
    for item in overrides:
        if "=" not in item:
            raise ConfigError(f"override {item!r} is not key=value")
        key, value = (s.strip() for s in item.split("=", 1))
        raw[key] = value
    return resolve_config(raw, base)


# ---------------------------------------------------------------------------
# helpers


def _fmt(x):
    return format(float(x), ".17g")


def _write_csv(path, header, rows):
    from .trust_region import _fmt as fmt_cell

    try:
        with open(path, "w", encoding="utf-8") as fh:
            fh.write(",".join(header) + "\n")
            for row in rows:
                fh.write(",".join(fmt_cell(v) for v in row) + "\n")
    except OSError as exc:
        raise IoFailure(f"{path}: {exc}") from exc


def _write_text(path, text):
    try:
        with open(path, "w", encoding="utf-8") as fh:
            fh.write(text)
    except OSError as exc:
        raise IoFailure(f"{path}: {exc}") from exc


def _out_dir(cfg):
    path = cfg["output.dir"] or os.getcwd()
    try:
        os.makedirs(path, exist_ok=True)
    except OSError as exc:
        raise IoFailure(f"cannot create output directory {path}: {exc}") from exc
    if not os.access(path, os.W_OK):
        raise IoFailure(f"output directory {path} is not writable")
    return path


def _dataset(cfg):
    from .data import load_manifest, synthetic_dataset

    if cfg["data.manifest"]:
        if not os.path.isfile(cfg["data.manifest"]):
            raise IoFailure(f"manifest not found: {cfg['data.manifest']}")
        return load_manifest(cfg["data.manifest"])
    if cfg["data.synthetic_pairs"] > 0:
        shape = tuple(int(v) for v in cfg["data.synthetic_shape"])
        if len(shape) != 2:
            raise ConfigError("data.synthetic_shape needs two integers")
        return synthetic_dataset(cfg["data.synthetic_pairs"], shape, cfg["data.sigma"],
                                 cfg["data.seed"])
    raise ConfigError("set data.manifest or data.synthetic_pairs")


def _options(cfg):
    from .gradient import SolverOptions

    return SolverOptions(cfg["solver.tol"], cfg["solver.max_iter"], cfg["solver.huber_tol"],
                         cfg["solver.polish"])


def _tr_config(cfg):
    from .trust_region import TRConfig

    kw = {k.split(".", 1)[1]: v for k, v in cfg.items() if k.startswith("tr.")}
    return TRConfig(**kw)


def _template(cfg, shape, kind=None):
    from .params import parse_kind

    return parse_kind(kind or cfg["param.kind"], shape)


def _alpha_fields(cfg, shape, n_terms, default=None):
    """Parameter fields from ``param.alpha`` (values or file) or ``param.init``."""
    from .params import parse_field

    alpha = cfg["param.alpha"]
    if isinstance(alpha, str):
        paths = [alpha] if n_terms == 1 else [alpha.replace("{i}", str(i)) for i in range(n_terms)]
        fields = []
        for p in paths:
            try:
                with open(p, encoding="utf-8") as fh:
                    fields.append(parse_field(fh.read()))
            except OSError as exc:
                raise IoFailure(f"{p}: {exc}") from exc
        for pf in fields:
            if tuple(pf.shape) != tuple(shape):
                raise ShapeMismatch(f"parameter file grid {pf.shape} does not match {shape}")
        return fields
    tpl = _template(cfg, shape)
    if alpha is None:
        values = [cfg["param.init"] if default is None else default] * n_terms
        return [tpl.with_dofs(np.full(tpl.p, v)) for v in values]
    if len(alpha) == n_terms:
        return [tpl.with_dofs(np.full(tpl.p, v)) for v in alpha]
    if len(alpha) == tpl.p * n_terms:
        return [tpl.with_dofs(alpha[i * tpl.p:(i + 1) * tpl.p]) for i in range(n_terms)]
    raise ConfigError(f"param.alpha has {len(alpha)} values; expected {n_terms} "
                      f"or {tpl.p * n_terms}")


def _set_threads(cfg):
    if cfg["run.threads"] is not None:
        os.environ["TVB_THREADS"] = str(cfg["run.threads"])


# ---------------------------------------------------------------------------
# commands


def cmd_denoise(cfg, out=sys.stdout):
    from .data import add_gaussian_noise, load_image, save_image
    from .denoise import DenoiseProblem, solve_tv
    from .grid import make_gradient_operator
    from .metrics import psnr, ssim

    if not cfg["data.input"]:
        raise ConfigError("denoise needs data.input")
    if not os.path.isfile(cfg["data.input"]):
        raise IoFailure(f"input image not found: {cfg['data.input']}")
    if not cfg["data.output"]:
        raise ConfigError("denoise needs data.output")
    out_parent = os.path.dirname(cfg["data.output"]) or "."
    if not os.path.isdir(out_parent):
        raise IoFailure(f"output directory does not exist: {out_parent}")
    f = load_image(cfg["data.input"])
    if cfg["data.sigma"] > 0:
        f = add_gaussian_noise(f, cfg["data.sigma"], cfg["data.seed"])
    schemes = cfg["model.schemes"]
    fields = _alpha_fields(cfg, f.shape, len(schemes))
    terms = [(make_gradient_operator(f.shape[0], f.shape[1], s), pf.lift())
             for s, pf in zip(schemes, fields)]
    prob = DenoiseProblem(f, terms)
    sol = solve_tv(prob, tol=cfg["solver.tol"], max_iter=cfg["solver.max_iter"],
                   polish=cfg["solver.polish"])
    u = sol.u.reshape(f.shape)
    save_image(cfg["data.output"], u)
    res = sol.residuals
    print(f"iterations {sol.iterations}", file=out)
    print(f"stationarity {_fmt(res.stationarity)}", file=out)
    print(f"complementarity {_fmt(res.complementarity)}", file=out)
    print(f"dual_feasibility {_fmt(res.dual_feasibility)}", file=out)
    if cfg["data.clean"]:
        clean = load_image(cfg["data.clean"])
        print(f"ssim {_fmt(ssim(u, clean))}", file=out)
        print(f"psnr {_fmt(psnr(u, clean))}", file=out)
        print(f"ssim_input {_fmt(ssim(f, clean))}", file=out)
    return EXIT_OK


def _pair_metrics(dataset, evaluation):
    from .metrics import psnr, ssim

    rows = []
    for pair, sol in zip(dataset, evaluation.solutions):
        u = sol.u.reshape(pair.shape)
        cost = 0.5 * float(np.sum((u - pair.clean) ** 2))
        rows.append((pair.id, cost, ssim(u, pair.clean), psnr(u, pair.clean),
                     ssim(pair.noisy, pair.clean), psnr(pair.noisy, pair.clean)))
    return rows


def _train(cfg, schemes, fields0, tag, out_dir, out):
    from .gradient import Evaluator
    from .params import format_field
    from .trust_region import run, trace_to_csv

    dataset = _dataset(cfg)
    evaluator = Evaluator(dataset, schemes, _options(cfg))
    result = run(evaluator, fields0, _tr_config(cfg))
    names = [f"alpha{tag}.txt"] if len(fields0) == 1 else \
        [f"alpha{tag}_{i}.txt" for i in range(len(fields0))]
    for name, pf in zip(names, result.alpha):
        _write_text(os.path.join(out_dir, name), format_field(pf))
    _write_text(os.path.join(out_dir, f"trace{tag}.csv"), trace_to_csv(result.trace))
    rows = _pair_metrics(dataset, result.evaluation)
    _write_csv(os.path.join(out_dir, f"pairs{tag}.csv"),
               ("id", "cost", "ssim", "psnr", "ssim_noisy", "psnr_noisy"),
               [(str(r[0]),) + r[1:] for r in rows])
    mean_ssim = float(np.mean([r[2] for r in rows]))
    mean_psnr = float(np.mean([r[3] for r in rows]))
    summary = (fields0[0].describe(), result.iterations, result.final_step_norm(), result.cost,
               mean_ssim, mean_psnr)
    _write_csv(os.path.join(out_dir, f"metrics{tag}.csv"),
               ("patch", "iterations", "step_norm", "cost", "ssim", "psnr"), [summary])
    print(f"{tag.strip('_') or 'train'}: iterations {result.iterations} cost {_fmt(result.cost)} "
          f"ssim {mean_ssim:.4f} psnr {mean_psnr:.4f}", file=out)
    for name, pf in zip(names, result.alpha):
        head = " ".join(_fmt(v) for v in pf.dofs[:8])
        print(f"  {name}: {pf.describe()} [{head}{' ...' if pf.p > 8 else ''}]", file=out)
    return result


def cmd_train(cfg, out=sys.stdout):
    out_dir = _out_dir(cfg)
    dataset = _dataset(cfg)
    schemes = cfg["model.schemes"]
    fields0 = _alpha_fields(cfg, dataset.shape, len(schemes))
    _train(cfg, schemes, fields0, "", out_dir, out)
    return EXIT_OK


def cmd_compare(cfg, out=sys.stdout):
    """Single forward-difference model against the three-scheme model."""
    from .multi import DEFAULT_SCHEMES

    out_dir = _out_dir(cfg)
    dataset = _dataset(cfg)
    single = _train(cfg, ["forward"], _alpha_fields(cfg, dataset.shape, 1), "_single",
                    out_dir, out)
    multi_schemes = [s.value for s in DEFAULT_SCHEMES]
    init = [pf.with_dofs(pf.dofs / 3.0) for pf in _alpha_fields(cfg, dataset.shape, 3)]
    multi = _train(cfg, multi_schemes, init, "_multi", out_dir, out)
    _write_csv(os.path.join(out_dir, "compare.csv"), ("model", "iterations", "cost"),
               [("single", single.iterations, single.cost), ("multi", multi.iterations, multi.cost)])
    return EXIT_OK


def cmd_sweep(cfg, out=sys.stdout):
    from .gradient import Evaluator

    out_dir = _out_dir(cfg)
    dataset = _dataset(cfg)
    if cfg["param.kind"].strip().lower() != "scalar" or len(cfg["model.schemes"]) != 1:
        raise ConfigError("sweep supports a single scalar parameter only")
    grid = cfg["sweep.grid"]
    if grid is None:
        a, b, n = cfg["sweep.start"], cfg["sweep.stop"], cfg["sweep.num"]
        if n < 1 or a < 0 or b < a or (cfg["sweep.log"] and a <= 0):
            raise ConfigError("bad sweep range")
        grid = np.geomspace(a, b, n) if cfg["sweep.log"] else np.linspace(a, b, n)
    grid = np.sort(np.asarray(grid, dtype=float))
    if np.any(grid < 0):
        raise ConfigError("sweep values must be nonnegative")
    ev = Evaluator(dataset, cfg["model.schemes"], _options(cfg))
    rows = [(a, ev.cost(float(a))) for a in grid]
    _write_csv(os.path.join(out_dir, "sweep.csv"), ("alpha", "cost"), rows)
    best = min(rows, key=lambda r: r[1])
    print(f"sweep: {len(rows)} points, minimum cost {_fmt(best[1])} at alpha {_fmt(best[0])}",
          file=out)
    return EXIT_OK


def _directions(cfg, p):
    kind = cfg["gradcheck.direction"].strip().lower()
    if kind == "coordinates":
        return list(np.eye(p))
    if kind == "random":
        rng = np.random.default_rng(cfg["run.seed"])
        return [rng.standard_normal(p)]
    if kind == "ones":
        return [np.ones(p)]
    if kind == "zero":
        raise ConfigError("gradcheck direction must be nonzero")
    raise ConfigError(f"unknown gradcheck.direction {kind!r}")


def cmd_gradcheck(cfg, out=sys.stdout):
    from .gradient import Evaluator, concat_dofs, split_dofs

    dataset = _dataset(cfg)
    schemes = cfg["model.schemes"]
    fields = _alpha_fields(cfg, dataset.shape, len(schemes))
    x = concat_dofs(fields)
    dirs = _directions(cfg, x.size)
    step = cfg["gradcheck.step"]
    if not step > 0:
        raise ConfigError("gradcheck.step must be positive")
    ev = Evaluator(dataset, schemes, _options(cfg))
    ok = True

    def fd(cost_fn, d):
        # central where feasible, one-sided at the bound
        if np.all(x - step * d >= 0):
            return (cost_fn(x + step * d) - cost_fn(x - step * d)) / (2 * step)
        return (cost_fn(x + step * d) - cost_fn(x)) / step

    for gamma in cfg["gradcheck.gammas"]:
        grad = ev.huber(fields, gamma).gradient
        cost = lambda y, g=gamma: ev.cost(split_dofs(fields, y), g)  # noqa: E731
        num = np.array([fd(cost, d) for d in dirs])
        ana = np.array([grad @ d for d in dirs])
        err = float(np.max(np.abs(num - ana)) / max(np.max(np.abs(num)), 1e-300))
        passed = err <= cfg["gradcheck.threshold"]
        ok &= passed
        print(f"huber gamma {_fmt(gamma)} max_rel_error {_fmt(err)} "
              f"{'pass' if passed else 'FAIL'}", file=out)
    if cfg["gradcheck.bouligand"]:
        try:
            bev = ev.bouligand(fields)
            parts = bev.info["partitions"]
            if any(p.degenerate for pp in parts for p in pp):
                print("bouligand skipped (nonempty biactive/zero-inactive/triactive set)", file=out)
            else:
                cost = lambda y: ev.cost(split_dofs(fields, y))  # noqa: E731
                num = np.array([fd(cost, d) for d in dirs])
                ana = np.array([bev.gradient @ d for d in dirs])
                err = float(np.max(np.abs(num - ana)) / max(np.max(np.abs(num)), 1e-300))
                passed = err <= cfg["gradcheck.bouligand_threshold"]
                ok &= passed
                print(f"bouligand max_rel_error {_fmt(err)} {'pass' if passed else 'FAIL'}",
                      file=out)
        except AssumptionViolated as exc:
            print(f"bouligand skipped ({exc})", file=out)
    return EXIT_OK if ok else EXIT_NUMERICAL


def cmd_verify(cfg, out=sys.stdout):
    from .activesets import check_m_stationarity
    from .gradient import Evaluator

    dataset = _dataset(cfg)
    schemes = cfg["model.schemes"]
    fields = _alpha_fields(cfg, dataset.shape, len(schemes))
    ev = Evaluator(dataset, schemes, _options(cfg))
    evaluation = ev.evaluate(fields)
    grads = [sol.u - pair.clean.ravel() for sol, pair in zip(evaluation.solutions, dataset)]
    cert = check_m_stationarity(evaluation.problems, evaluation.solutions, grads, fields,
                                tol=cfg["verify.tol"])
    text = cert.report()
    out.write(text)
    if cfg["output.dir"]:
        _write_text(os.path.join(_out_dir(cfg), "certificate.txt"), text)
    return EXIT_OK if cert.stationary else EXIT_NUMERICAL


HANDLERS = {
    "denoise": cmd_denoise,
    "train": cmd_train,
    "sweep": cmd_sweep,
    "gradcheck": cmd_gradcheck,
    "verify": cmd_verify,
    "compare-discretizations": cmd_compare,
}


def build_parser():
    parser = argparse.ArgumentParser(prog="tvbilevel",
                                     description="Bilevel learning of TV denoising parameters.")
    parser.add_argument("command", choices=COMMANDS)
    parser.add_argument("--config", "-c", help="flat key = value configuration file")
    parser.add_argument("overrides", nargs="*", metavar="key=value",
                        help="configuration overrides")
    return parser


def main(argv=None, out=None):
    out = out or sys.stdout
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as exc:
        return EXIT_OK if exc.code == 0 else EXIT_USAGE
    try:
        cfg = load_config(args.config, args.overrides)
        _set_threads(cfg)
        return HANDLERS[args.command](cfg, out)
    except (ConfigError, InvalidParam, ShapeMismatch) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_USAGE
    except (IoFailure, UnsupportedFormat, CorruptFile, OSError) as exc:
        print(f"I/O error: {exc}", file=sys.stderr)
        return EXIT_IO
    except (NonConvergence, SingularSystem, MaxIterations, InfeasibleDual,
            AssumptionViolated, TVBilevelError, FloatingPointError) as exc:
        print(f"numerical error: {exc}", file=sys.stderr)
        return EXIT_NUMERICAL


if __name__ == "__main__":
    sys.exit(main())
