"""Command line entry point ``mondeq-cert``.

Every subcommand writes a JSON report (sorted keys, fields ending in
``time_s`` hold wall-clock timings and are the only run-to-run differences).
"""
from __future__ import annotations

import argparse
import gzip
import json
import logging
import math
import sys
import time
from concurrent.futures import ProcessPoolExecutor
from pathlib import Path

import numpy as np
from scipy.stats import beta

from . import attack, ellipsoid, fixpoint, lipschitz, oracle, robustness
from .errors import CertError
from .netio import NormalizationSpec, PerturbationSpec, generate_network, load_network, save_network
from .norms import norm_label, parse_norm
from .sdpcore import SolverSettings

log = logging.getLogger("mondeq_cert")


# ---------------------------------------------------------------------------
# helpers


def clopper_pearson(k: int, n: int, alpha: float = 0.05):
    """Exact two-sided binomial confidence interval."""
    if n == 0:
        return (0.0, 1.0)
    lo = 0.0 if k == 0 else float(beta.ppf(alpha / 2, k, n - k + 1))
    hi = 1.0 if k == n else float(beta.ppf(1 - alpha / 2, k + 1, n - k))
    return (lo, hi)


def strip_timing(obj):
    """Copy of a report without timing fields, for reproducibility checks."""
    if isinstance(obj, dict):
        return {k: strip_timing(v) for k, v in obj.items() if not k.endswith("time_s")}
    if isinstance(obj, list):
        return [strip_timing(v) for v in obj]
    return obj


def _jsonable(obj):
    if isinstance(obj, dict):
        return {str(k): _jsonable(v) for k, v in obj.items()}
    if isinstance(obj, (list, tuple)):
        return [_jsonable(v) for v in obj]
    if isinstance(obj, np.ndarray):
        return _jsonable(obj.tolist())
    if isinstance(obj, (np.floating, float)):
        v = float(obj)
        return v if math.isfinite(v) else str(v)
    if isinstance(obj, np.integer):
        return int(obj)
    if isinstance(obj, np.bool_):
        return bool(obj)
    return obj


def write_report(report: dict, path):
    text = json.dumps(_jsonable(report), sort_keys=True, indent=2) + "\n"
    if path in (None, "-"):
        sys.stdout.write(text)
    else:
        Path(path).write_text(text)


def load_inputs(path):
    """A JSON vector, a JSON list of vectors, or a directory of JSON vectors."""
    p = Path(path)
    if p.is_dir():
        files = sorted(p.glob("*.json"))
        return [f.name for f in files], [np.asarray(json.loads(f.read_text()), dtype=float) for f in files]
    data = np.asarray(json.loads(p.read_text()), dtype=float)
    if data.ndim == 1:
        return [p.name], [data]
    return [f"{p.name}[{k}]" for k in range(len(data))], list(data)


def effective_eps(net, eps):
    if net.normalization is None:
        return eps
    r = net.normalization.radius(eps)
    log.info("normalized perturbation: eps %g / sigma %g = %.6g", eps, net.normalization.sigma, r)
    return r


def _settings(args):
    kw = {}
    if getattr(args, "solver_tol", None) is not None:
        kw["tol"] = args.solver_tol
    return SolverSettings.from_env(**kw)


def _common(args, net):
    out = {"command": args.command, "net": str(args.net), "norm": norm_label(parse_norm(args.norm))}
    if net.normalization is not None:
        out["normalization"] = {"mu": net.normalization.mu, "sigma": net.normalization.sigma}
    return out


def _per_item_path(base, name, eps):
    path = Path(base)
    tag = "".join(ch if ch.isalnum() else "_" for ch in Path(name).stem)
    return path.with_name(f"{path.stem}.{tag}.eps{eps:g}{path.suffix}")


def _map(fn, items, workers):
    if workers > 1 and len(items) > 1:
        with ProcessPoolExecutor(max_workers=workers) as ex:
            return list(ex.map(fn, items))
    return [fn(it) for it in items]


def batch_summary(results, key="certified"):
    n = len(results)
    k = sum(bool(r.get(key)) for r in results)
    lo, hi = clopper_pearson(k, n)
    times = [r.get("solve_time_s", 0.0) for r in results]
    return {"n": n, "count": k, "ratio": k / n if n else 0.0, "ci95": [lo, hi],
            "mean_time_s": float(np.mean(times)) if times else 0.0}


# ---------------------------------------------------------------------------
# per-item workers (module level so they pickle)


def _certify_item(job):
    net, name, x0, eps, q, settings, early, dump, do_attack, seed = job
    t0 = time.perf_counter()
    pert = PerturbationSpec(x0, eps, q)
    rep = robustness.certify_robustness(net, pert, settings, early_exit=early)
    d = rep.to_dict()
    d.update(input=name, solve_time_s=time.perf_counter() - t0)
    if dump:
        from .sdpcore import dump_problem, shor_relax
        for i in range(net.K):
            if i != rep.y0:
                dump_problem(shor_relax(robustness.build_certmon(net, pert, rep.y0, i)),
                             f"{dump}.{name}.label{i}.txt")
    if do_attack:
        a = attack.pgd_attack(net, x0, eps, q, seed=seed)
        d["attack_success"] = a.success
    return d


# ---------------------------------------------------------------------------
# subcommands


def cmd_gen(args):
    net = generate_network(args.p0, args.p, args.K, m=args.m, seed=args.seed, scale=args.scale)
    if args.mnist_normalization:
        net = type(net)(net.W, net.U, net.u, net.C, net.c, net.m, NormalizationSpec())
    save_network(net, args.out)
    report = {"command": "gen", "p0": args.p0, "p": args.p, "K": args.K, "m": args.m,
              "seed": args.seed, "scale": args.scale, "net": str(args.out)}
    if args.x0_out:
        rng = np.random.default_rng([args.seed, 1])
        X = rng.normal(size=(args.inputs, args.p0))
        data = X[0].tolist() if args.inputs == 1 else X.tolist()
        Path(args.x0_out).write_text(json.dumps(data) + "\n")
        report["inputs"] = str(args.x0_out)
    write_report(report, args.report)
    return 0


def cmd_predict(args):
    net = load_network(args.net)
    names, X = load_inputs(args.x0)
    items = []
    for name, x in zip(names, X):
        r = fixpoint.solve_equilibrium(net, x)
        F = net.C @ r.z + net.c
        items.append({"input": name, "label": int(np.argmax(F)), "scores": F,
                      "residual": r.residual, "converged": r.converged})
    write_report({"command": "predict", "net": str(args.net), "results": items}, args.out)
    return 0


def cmd_certify(args):
    net = load_network(args.net)
    q = parse_norm(args.norm)
    names, X = load_inputs(args.x0)
    settings = _settings(args)
    report = _common(args, net)
    report.update(seed=args.seed, runs=[])
    for eps in args.eps:
        r = effective_eps(net, eps)
        jobs = [(net, n, x, r, q, settings, not args.no_early_exit, args.dump_sdp, args.attack,
                 args.seed) for n, x in zip(names, X)]
        results = _map(_certify_item, jobs, args.workers)
        run = {"eps": eps, "effective_eps": r, "results": results, "summary": batch_summary(results)}
        if args.attack:
            not_attacked = sum(not d["attack_success"] for d in results)
            run["attack_summary"] = batch_summary([{"x": not d["attack_success"]} for d in results], "x")
            run["ordering_ok"] = run["summary"]["count"] <= not_attacked
            if not run["ordering_ok"]:
                log.error("certified count exceeds unattacked count at eps=%g", eps)
        report["runs"].append(run)
    write_report(report, args.out)
    return 0


def _input_ball(args, net):
    if args.center is not None:
        center = np.asarray(json.loads(Path(args.center).read_text()), dtype=float)
    else:
        center = np.zeros(net.p0)
    return lipschitz.InputBall(center, args.radius, args.S_norm or args.norm)


def cmd_lipschitz(args):
    net = load_network(args.net)
    q = parse_norm(args.norm)
    S = _input_ball(args, net)
    bound = lipschitz.lipschitz_bound(net, S, q, _settings(args), dump_path=args.dump_sdp)
    report = _common(args, net)
    report.update(bound.to_dict())
    report["baseline"] = lipschitz.baseline_bounds(net, q)
    if args.samples:
        report["sampled_lower_bound"] = lipschitz.sampled_lower_bound(net, S, q, args.samples, args.seed)
        report["seed"] = args.seed
    write_report(report, args.out)
    return 0


def cmd_certify_lip(args):
    net = load_network(args.net)
    q = parse_norm(args.norm)
    names, X = load_inputs(args.x0)
    if args.bound:
        bound = lipschitz.LipschitzBound.from_dict(json.loads(Path(args.bound).read_text()))
    else:
        eps_max = max(effective_eps(net, e) for e in args.eps)
        S = lipschitz.covering_ball(np.array(X), eps_max, q)
        bound = lipschitz.lipschitz_bound(net, S, q, _settings(args))
    report = _common(args, net)
    report.update(bound=bound.to_dict(), runs=[])
    for eps in args.eps:
        r = effective_eps(net, eps)
        results = []
        for name, x in zip(names, X):
            d = lipschitz.certify_via_lipschitz(net, x, r, q, bound)
            d["input"] = name
            results.append(d)
        report["runs"].append({"eps": eps, "effective_eps": r, "results": results,
                               "summary": batch_summary(results)})
    write_report(report, args.out)
    return 0


def cmd_ellipsoid(args):
    net = load_network(args.net)
    q = parse_norm(args.norm)
    names, X = load_inputs(args.x0)
    settings = _settings(args)
    report = _common(args, net)
    report.update(slope=not args.no_slope, seed=args.seed, runs=[])
    rng = np.random.default_rng(args.seed)
    for eps in args.eps:
        r = effective_eps(net, eps)
        results = []
        for name, x in zip(names, X):
            pert = PerturbationSpec(x, r, q)
            rep = ellipsoid.certify_via_ellipsoid(net, pert, slope=not args.no_slope, settings=settings)
            d = rep.to_dict()
            d["input"] = name
            results.append(d)
            if args.figure and rep.result is not None:
                from .sampling import sample_region
                y0 = rep.y0
                i = args.labels[1] if args.labels else max(rep.gaps, key=rep.gaps.get)
                if args.labels:
                    y0 = args.labels[0]
                F = fixpoint.forward_batch(net, sample_region(rng, x, r, q, args.samples))
                fig = ellipsoid.projection_figure(rep.result.ellipsoid, F, y0, i)
                path = Path(args.figure)
                if len(X) > 1 or len(args.eps) > 1:
                    path = _per_item_path(path, name, eps)
                fig.to_svg(path, title=f"eps = {eps:g}")
                d["figure"] = str(path)
        report["runs"].append({"eps": eps, "effective_eps": r, "results": results,
                               "summary": batch_summary(results)})
    write_report(report, args.out)
    return 0


def _image_svg(x0, x_adv, label, path):
    import matplotlib
    matplotlib.use("Agg")
    import matplotlib.pyplot as plt
    plt.rcParams["svg.hashsalt"] = "mondeq-cert"
    side = int(round(math.sqrt(len(x0))))
    fig, axes = plt.subplots(1, 2, figsize=(6, 3))
    for ax, v, title in ((axes[0], x0, "clean"), (axes[1], x_adv, f"adversarial, label {label}")):
        if side * side == len(v):
            ax.imshow(np.reshape(v, (side, side)), cmap="gray")
            ax.set_xticks([]); ax.set_yticks([])
        else:
            ax.bar(np.arange(len(v)), v)
        ax.set_title(title, fontsize=9)
    fig.savefig(path, format="svg", metadata={"Date": None})
    plt.close(fig)


def cmd_attack(args):
    net = load_network(args.net)
    q = parse_norm(args.norm)
    names, X = load_inputs(args.x0)
    report = _common(args, net)
    report.update(seed=args.seed, steps=args.steps, restarts=args.restarts, clamp=args.clamp, runs=[])
    for eps in args.eps:
        r = effective_eps(net, eps)
        results = []
        for name, x in zip(names, X):
            t0 = time.perf_counter()
            a = attack.pgd_attack(net, x, r, q, steps=args.steps, step_size=args.step_size,
                                  restarts=args.restarts, seed=args.seed, clamp=args.clamp)
            d = a.to_dict()
            d.update(input=name, solve_time_s=time.perf_counter() - t0)
            results.append(d)
            if args.image and a.success:
                path = Path(args.image)
                if len(X) > 1 or len(args.eps) > 1:
                    path = _per_item_path(path, name, eps)
                _image_svg(x, a.x_adv, a.label, path)
                d["image"] = str(path)
        report["runs"].append({"eps": eps, "effective_eps": r, "results": results,
                               "summary": batch_summary(results, "success")})
    write_report(report, args.out)
    return 0


def cmd_oracle(args):
    net = load_network(args.net)
    q = parse_norm(args.norm)
    if net.p > args.max_hidden:
        raise CertError(f"oracle is capped at p <= {args.max_hidden}, network has p = {net.p}")
    names, X = load_inputs(args.x0)
    report = _common(args, net)
    report["runs"] = []
    for eps in args.eps:
        r = effective_eps(net, eps)
        results = []
        for name, x in zip(names, X):
            t0 = time.perf_counter()
            y0 = fixpoint.predict(net, x)
            gaps = oracle.exact_gaps(net, PerturbationSpec(x, r, q), y0)
            results.append({"input": name, "y0": y0, "gaps": {str(k): v for k, v in gaps.items()},
                            "robust": all(v < 0 for v in gaps.values()),
                            "solve_time_s": time.perf_counter() - t0})
        report["runs"].append({"eps": eps, "effective_eps": r, "results": results,
                               "summary": batch_summary(results, "robust")})
    write_report(report, args.out)
    return 0


def read_idx_images(path):
    """Images from an IDX3 file (optionally gzipped) as an (n, rows*cols) uint8 array."""
    raw = Path(path).read_bytes()
    if raw[:2] == b"\x1f\x8b":
        raw = gzip.decompress(raw)
    magic = int.from_bytes(raw[:4], "big")
    if magic != 2051:
        raise CertError(f"{path}: not an IDX image file (magic {magic})")
    n, rows, cols = (int.from_bytes(raw[4 * k:4 * k + 4], "big") for k in (1, 2, 3))
    data = np.frombuffer(raw, dtype=np.uint8, offset=16)
    if data.size != n * rows * cols:
        raise CertError(f"{path}: truncated IDX payload")
    return data.reshape(n, rows * cols)


def cmd_import_mnist(args):
    imgs = read_idx_images(args.images)
    norm = NormalizationSpec(args.mu, args.sigma)
    sel = imgs[args.offset:args.offset + args.count]
    out = Path(args.out_dir)
    out.mkdir(parents=True, exist_ok=True)
    for k, img in enumerate(sel):
        vec = norm.apply(img / 255.0)
        (out / f"{args.offset + k:05d}.json").write_text(json.dumps(vec.tolist()) + "\n")
    write_report({"command": "import-mnist", "count": len(sel), "offset": args.offset,
                  "mu": args.mu, "sigma": args.sigma, "out_dir": str(out)}, args.report)
    return 0


# ---------------------------------------------------------------------------
# parser


def build_parser():
    ap = argparse.ArgumentParser(prog="mondeq-cert", description=__doc__.splitlines()[0])
    ap.add_argument("-v", "--verbose", action="store_true", help="log progress to stderr")
    sub = ap.add_subparsers(dest="command", required=True)

    def common(p, eps=True, inputs=True):
        p.add_argument("--net", required=True, help="network JSON file")
        if inputs:
            p.add_argument("--x0", required=True, help="input vector JSON, list of vectors, or directory")
        if eps:
            p.add_argument("--eps", type=float, nargs="+", required=True, help="perturbation radii")
        p.add_argument("--norm", default="2", help="2 or inf")
        p.add_argument("--out", default="-", help="report path (default stdout)")
        p.add_argument("--seed", type=int, default=0)
        p.add_argument("--solver-tol", type=float, default=None,
                       help="solver tolerance (overrides MONDEQ_SOLVER_TOL)")

    p = sub.add_parser("gen", help="generate a random monotone network")
    p.add_argument("--p0", type=int, required=True)
    p.add_argument("--p", type=int, required=True)
    p.add_argument("--K", type=int, required=True)
    p.add_argument("--m", type=float, default=1.0)
    p.add_argument("--scale", type=float, default=1.0)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--out", required=True, help="network JSON path")
    p.add_argument("--x0-out", default=None, help="also write random input vector(s) here")
    p.add_argument("--inputs", type=int, default=1, help="number of random inputs for --x0-out")
    p.add_argument("--mnist-normalization", action="store_true",
                   help="attach mu=0.1307, sigma=0.3081 so eps is given in pixel units")
    p.add_argument("--report", default="-")
    p.set_defaults(func=cmd_gen)

    p = sub.add_parser("predict", help="equilibrium scores and labels")
    p.add_argument("--net", required=True)
    p.add_argument("--x0", required=True)
    p.add_argument("--out", default="-")
    p.set_defaults(func=cmd_predict)

    p = sub.add_parser("certify", help="robustness certificates from per-label gap bounds")
    common(p)
    p.add_argument("--workers", type=int, default=1)
    p.add_argument("--no-early-exit", action="store_true")
    p.add_argument("--attack", action="store_true", help="also run PGD and check the ratio ordering")
    p.add_argument("--dump-sdp", default=None, help="path prefix for text dumps of the SDPs")
    p.set_defaults(func=cmd_certify)

    p = sub.add_parser("lipschitz", help="Lipschitz upper bound over a ball S")
    common(p, eps=False, inputs=False)
    p.add_argument("--S-center", "--center", dest="center", default=None,
                   help="center of S (JSON vector, default 0)")
    p.add_argument("--S-radius", "--radius", dest="radius", type=float, required=True)
    p.add_argument("--S-norm", dest="S_norm", default=None, help="norm of S (default --norm)")
    p.add_argument("--samples", type=int, default=0, help="pairs for the sampled lower bound")
    p.add_argument("--dump-sdp", default=None)
    p.set_defaults(func=cmd_lipschitz)

    p = sub.add_parser("certify-lip", help="robustness via 2 L eps < margin")
    common(p)
    p.add_argument("--bound", default=None, help="report from the lipschitz subcommand")
    p.set_defaults(func=cmd_certify_lip)

    p = sub.add_parser("ellipsoid", help="outer ellipsoid of the output set")
    common(p)
    p.add_argument("--no-slope", action="store_true", help="drop the slope-restriction multipliers")
    p.add_argument("--figure", default=None, help="SVG path for the projection figure")
    p.add_argument("--labels", type=lambda s: [int(v) for v in s.split(",")], default=None,
                   help="y0,i for the figure axes")
    p.add_argument("--samples", type=int, default=2000)
    p.set_defaults(func=cmd_ellipsoid)

    p = sub.add_parser("attack", help="PGD attack")
    common(p)
    p.add_argument("--steps", type=int, default=100)
    p.add_argument("--restarts", type=int, default=10)
    p.add_argument("--step-size", type=float, default=None)
    p.add_argument("--clamp", action="store_true", help="clamp to the normalized pixel range")
    p.add_argument("--image", default=None, help="SVG path for clean/adversarial images")
    p.set_defaults(func=cmd_attack)

    p = sub.add_parser("oracle", help="exact gaps by activation-pattern enumeration")
    common(p)
    p.add_argument("--max-hidden", type=int, default=oracle.MAX_HIDDEN)
    p.set_defaults(func=cmd_oracle)

    p = sub.add_parser("import-mnist", help="convert IDX images to normalized JSON vectors")
    p.add_argument("--images", required=True)
    p.add_argument("--out-dir", required=True)
    p.add_argument("--count", type=int, default=100)
    p.add_argument("--offset", type=int, default=0)
    p.add_argument("--mu", type=float, default=0.1307)
    p.add_argument("--sigma", type=float, default=0.3081)
    p.add_argument("--report", default="-")
    p.set_defaults(func=cmd_import_mnist)
    return ap


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(message)s")
    if getattr(args, "eps", None) and min(args.eps) <= 0:
        print("error: eps values must be positive", file=sys.stderr)
        return 2
    try:
        if args.command == "oracle" and args.max_hidden > oracle.MAX_HIDDEN:
            raise CertError(f"oracle is hard-capped at p <= {oracle.MAX_HIDDEN}")
        return args.func(args)
    except (CertError, OSError, ValueError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 1


if __name__ == "__main__":
    sys.exit(main())
