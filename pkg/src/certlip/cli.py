"""``certlip`` command line: train, certify, attack, lipschitz, report.

Exit codes: 0 success, 1 usage/config error, 2 numerical failure,
3 soundness alarm. ``CERTLIP_THREADS`` caps BLAS threads (default 1).
"""

from __future__ import annotations

import argparse
import logging
import os
import sys
from pathlib import Path

import numpy as np

from .checkpoint import CheckpointError, load_checkpoint, save_checkpoint
from .config import ConfigError, RunConfig, build_dataset, load_config, parse_config, serialize_config
from .datasets import BlobSpec, Dataset, IDXError, gen_concentric_rings, gen_gaussian_blobs, load_idx
from .gloro import cert_results_csv, certify_logits, clean_accuracy, vra
from .lipschitz import NonConvergenceError, layer_factors, layer_operators, lipschitz_report, naive_residual_bound
from .network import LinearResidualBlock, forward
from .oracle import SizeGuardError, exact_spectral_norm, materialize_conv_operator, soundness_sweep
from .tensor_core import NonFiniteError
from .training import DivergenceError, train

log = logging.getLogger("certlip")

EXIT_OK, EXIT_CONFIG, EXIT_NUMERIC, EXIT_ALARM = 0, 1, 2, 3


class UsageError(Exception):
    pass


def _bool(s: str) -> bool:
    low = str(s).lower()
    if low in ("1", "true", "yes", "on"):
        return True
    if low in ("0", "false", "no", "off"):
        return False
    raise argparse.ArgumentTypeError(f"expected a boolean, got {s!r}")


def _kv(body: str) -> dict[str, str]:
    out = {}
    for part in filter(None, body.split(",")):
        if "=" not in part:
            raise UsageError(f"bad data spec fragment {part!r}")
        k, v = part.split("=", 1)
        out[k.strip()] = v.strip()
    return out


def resolve_data(spec: str, run_cfg: RunConfig | None) -> Dataset:
    """Dataset selector for ``--data``.

    ``heldout`` / ``train``       splits of the dataset in the checkpoint's run config
    ``config:PATH[:train]``       held-out (or train) split of another config
    ``blobs:k=..,d=..,sep=..,n=..,noise=..,seed=..``
    ``rings:radii=1;3,n=..,noise=..,seed=..``
    ``idx:IMAGES;LABELS``
    """
    if spec in ("heldout", "train"):
        if run_cfg is None:
            raise UsageError("checkpoint carries no run config; pass an explicit --data")
        tr, te = build_dataset(run_cfg.data)
        return te if spec == "heldout" else tr
    kind, _, body = spec.partition(":")
    if kind == "config":
        path, _, which = body.partition(":")
        tr, te = build_dataset(load_config(path).data)
        return tr if which == "train" else te
    if kind == "blobs":
        kv = _kv(body)
        return gen_gaussian_blobs(BlobSpec(
            int(kv.get("k", 4)), int(kv.get("d", 8)), float(kv.get("sep", 2.4)),
            int(kv.get("n", 100)), float(kv.get("noise", 0.25)), int(kv.get("seed", 0)),
        ))
    if kind == "rings":
        kv = _kv(body)
        radii = [float(r) for r in kv.get("radii", "1;3").split(";")]
        return gen_concentric_rings(len(radii), int(kv.get("n", 100)), radii, float(kv.get("noise", 0.1)),
                                    int(kv.get("seed", 0)))
    if kind == "idx":
        images, _, labels = body.partition(";")
        return load_idx(images, labels)
    raise UsageError(f"unknown data spec {spec!r}")


def _load(ckpt: str):
    if not Path(ckpt).exists():
        raise UsageError(f"checkpoint not found: {ckpt}")
    net, extras, run_text = load_checkpoint(ckpt)
    run_cfg = parse_config(run_text) if run_text else None
    return net, extras, run_cfg


def cmd_train(args) -> int:
    if not Path(args.config).exists():
        raise UsageError(f"config file not found: {args.config}")
    cfg = load_config(args.config)
    if args.seed is not None:
        log.info("seed override: %d (config had %d)", args.seed, cfg.train.seed)
        cfg = cfg.with_seed(args.seed)
    out = Path(args.out or cfg.run.out_dir)
    out.mkdir(parents=True, exist_ok=True)
    (out / "config.ini").write_text(serialize_config(cfg), encoding="utf-8")
    net, tlog = train(cfg, out)
    (out / "trainlog.csv").write_text(tlog.to_csv(), encoding="utf-8")
    (out / "threats.csv").write_text(tlog.threats_csv(), encoding="utf-8")
    save_checkpoint(net, out / "final.ckpt", tlog.final_extras, serialize_config(cfg))
    (out / "lipschitz.csv").write_text(tlog.final_report.to_csv(), encoding="utf-8")
    last = tlog.rows[-1]
    print(f"seed={cfg.train.seed} epochs={len(tlog.rows)} clean={last['clean_acc']!r} "
          f"vra={last['vra']!r} k_sub={last['k_sub']!r} out={out}")
    return EXIT_OK


def _safety(args, run_cfg) -> float:
    if args.safety is not None:
        return args.safety
    return run_cfg.train.safety if run_cfg is not None else 1e-6


def cmd_certify(args) -> int:
    net, _, run_cfg = _load(args.ckpt)
    ds = resolve_data(args.data, run_cfg)
    report = lipschitz_report(net, "certify", safety=_safety(args, run_cfg))
    results = certify_logits(forward(net, ds.inputs), report.margin, args.eps)
    if args.out:
        Path(args.out).write_text(cert_results_csv(results, ds.labels), encoding="utf-8")
    print(f"clean={clean_accuracy(results, ds.labels)!r} vra={vra(results, ds.labels)!r} "
          f"n={len(ds)} eps={args.eps!r} k_sub={report.k_sub!r}")
    return EXIT_OK


def cmd_attack(args) -> int:
    net, _, run_cfg = _load(args.ckpt)
    ds = resolve_data(args.data, run_cfg)
    report = lipschitz_report(net, "certify", safety=_safety(args, run_cfg), k_scale=args.k_scale)
    if args.only_certified:
        sw = soundness_sweep(net, ds.inputs, args.eps, report, args.steps, args.restarts, args.seed)
        if args.out and sw.attack is not None:
            Path(args.out).write_text(
                sw.attack.to_csv(ds.labels[sw.certified_mask], np.ones(sw.num_certified, dtype=int)),
                encoding="utf-8",
            )
        print(f"points={sw.num_points} certified={sw.num_certified} violations={sw.num_violations} "
              f"eps={args.eps!r}")
        return EXIT_ALARM if sw.alarm else EXIT_OK
    from .oracle import pgd_attack

    results = certify_logits(forward(net, ds.inputs), report.margin, args.eps)
    pred = np.array([r.top for r in results])
    cert = np.array([r.certified for r in results])
    att = pgd_attack(net, ds.inputs, pred, args.eps, args.steps, args.restarts, seed=args.seed)
    if args.out:
        Path(args.out).write_text(att.to_csv(ds.labels, cert), encoding="utf-8")
    broken = int((att.success & cert).sum())
    print(f"points={len(ds)} successes={int(att.success.sum())} certified={int(cert.sum())} "
          f"certified_broken={broken} eps={args.eps!r}")
    return EXIT_ALARM if broken else EXIT_OK


def cmd_lipschitz(args) -> int:
    net, _, run_cfg = _load(args.ckpt)
    safety = _safety(args, run_cfg)
    factors = layer_factors(net, args.mode, {} if args.mode == "train" else None, safety=safety)
    header = ["layer", "name", "method", "K", "residual", "iterations"]
    rows = [[f.bound.index, f.bound.name, f.bound.method, repr(f.bound.value), repr(f.bound.residual),
             f.bound.iterations] for f in factors]
    if args.compare_oracle:
        header += ["exact", "naive"]
        ops = {(o.index, o.name): o for o in layer_operators(net)}
        for row, f in zip(rows, factors):
            exact, naive = "", ""
            op = ops.get((f.bound.index, f.bound.name))
            if f.bound.method == "activation-1":
                exact = repr(1.0)
            elif op is not None:
                try:
                    if op.kind == "conv":
                        M = materialize_conv_operator(op.weight, op.input_shape, op.stride, op.padding).matrix
                    else:
                        M = op.weight
                    exact = repr(exact_spectral_norm(M))
                except SizeGuardError:
                    exact = "skipped"
            layer = net.spec.layers[f.bound.index]
            if isinstance(layer, LinearResidualBlock):
                i = f.bound.index
                naive = repr(naive_residual_bound(layer, net.params[f"{i}.W"], net.params[f"{i}.beta"],
                                                  net.shapes[i], mode="certify", safety=safety))
            elif f.bound.name == "conventional_residual":
                naive = repr(f.bound.value)
            row += [exact, naive]
    import csv
    import io

    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(header)
    w.writerows(rows)
    text = buf.getvalue()
    if args.out:
        Path(args.out).write_text(text, encoding="utf-8")
    sys.stdout.write(text)
    return EXIT_OK


def cmd_report(args) -> int:
    from .report import write_report

    for d in args.logs:
        if not (Path(d) / "trainlog.csv").exists():
            raise UsageError(f"no trainlog.csv in {d}")
    summaries = write_report(args.logs, args.out)
    print(f"runs={len(summaries)} out={args.out}")
    return EXIT_OK


def build_parser() -> argparse.ArgumentParser:
    ap = argparse.ArgumentParser(prog="certlip", description=__doc__.splitlines()[0])
    ap.add_argument("-v", "--verbose", action="store_true")
    sub = ap.add_subparsers(dest="command", required=True)

    p = sub.add_parser("train", help="train a network from a run config")
    p.add_argument("--config", required=True)
    p.add_argument("--seed", type=int)
    p.add_argument("--out")
    p.set_defaults(func=cmd_train)

    p = sub.add_parser("certify", help="certify a dataset with a checkpoint")
    p.add_argument("--ckpt", required=True)
    p.add_argument("--data", default="heldout")
    p.add_argument("--eps", type=float, required=True)
    p.add_argument("--out")
    p.add_argument("--safety", type=float)
    p.set_defaults(func=cmd_certify)

    p = sub.add_parser("attack", help="PGD attack, optionally only on certified points")
    p.add_argument("--ckpt", required=True)
    p.add_argument("--data", default="heldout")
    p.add_argument("--eps", type=float, required=True)
    p.add_argument("--only-certified", type=_bool, nargs="?", const=True, default=False)
    p.add_argument("--steps", type=int, default=200)
    p.add_argument("--restarts", type=int, default=5)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--out")
    p.add_argument("--safety", type=float)
    p.add_argument("--k-scale", type=float, default=1.0, help=argparse.SUPPRESS)
    p.set_defaults(func=cmd_attack)

    p = sub.add_parser("lipschitz", help="per-layer Lipschitz bounds")
    p.add_argument("--ckpt", required=True)
    p.add_argument("--mode", choices=["train", "certify"], default="certify")
    p.add_argument("--compare-oracle", type=_bool, nargs="?", const=True, default=False)
    p.add_argument("--safety", type=float)
    p.add_argument("--out")
    p.set_defaults(func=cmd_lipschitz)

    p = sub.add_parser("report", help="aggregate training runs")
    p.add_argument("--logs", nargs="+", required=True)
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_report)
    return ap


def main(argv: list[str] | None = None) -> int:
    ap = build_parser()
    try:
        args = ap.parse_args(argv)
    except SystemExit as exc:
        return EXIT_CONFIG if exc.code else EXIT_OK
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    threads = int(os.environ.get("CERTLIP_THREADS", "1"))
    try:
        from threadpoolctl import threadpool_limits

        with threadpool_limits(limits=threads):
            return args.func(args)
    except (UsageError, ConfigError, CheckpointError, IDXError, FileNotFoundError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    except (DivergenceError, NonConvergenceError, NonFiniteError, FloatingPointError) as exc:
        print(f"numerical failure: {exc}", file=sys.stderr)
        return EXIT_NUMERIC


if __name__ == "__main__":
    sys.exit(main())
