"""``inceptkit`` command line.

Exit codes: 0 ok, 1 input error or failed check, 2 lint error, 3 training divergence.
"""

from __future__ import annotations

import argparse
import json
import sys
from pathlib import Path

from . import analysis, archfile, checkpoint, data, nnops, rewrite, train, verify
from .blocks import STEM_VARIANTS, build_network, with_stem

EXIT_OK, EXIT_INPUT, EXIT_LINT, EXIT_DIVERGED = 0, 1, 2, 3

PASS_ALIASES = {
    "factorize_5x5": "factorize_5x5_to_two_3x3",
    "factorize_7x7": "factorize_7x7_to_three_3x3",
    "factorize_nxn": "factorize_nxn_to_asymmetric",
    "factorize_3x3": "factorize_3x3_to_two_2x2",
}


class InputError(Exception):
    pass


def _load_arch(ref: str):
    """Arch from a file path, or a bundled name such as ``v3`` or ``tiny``."""
    path = Path(ref)
    if not path.exists() and ref in archfile.BUNDLED:
        path = archfile.bundled(ref)
    if not path.exists():
        raise InputError(f"arch file not found: {ref}")
    try:
        return archfile.load(path)
    except archfile.ArchParseError as e:
        raise InputError(f"{ref}: {e}") from None


def _emit(text: str, out: str | None) -> None:
    if out:
        Path(out).write_text(text)
    else:
        sys.stdout.write(text if text.endswith("\n") else text + "\n")


def _load_data(path: str) -> data.Dataset:
    try:
        return data.load(path)
    except (OSError, data.DatasetError) as e:
        raise InputError(f"dataset {path}: {e}") from None


# -- commands ----------------------------------------------------------------------

def cmd_analyze(args) -> int:
    arch = _load_arch(args.arch)
    graph, _ = build_network(arch, batch=args.batch)
    rep = analysis.count_cost(graph, batch=args.batch, mode=args.mode, include_aux=args.include_aux)
    findings = analysis.lint(graph)
    if args.format == "csv":
        text = rep.to_csv()
    elif args.format == "json":
        doc = json.loads(rep.to_json())
        doc["lint"] = [f.__dict__ for f in findings]
        text = json.dumps(doc, indent=1)
    else:
        lines = [rep.to_table(), ""]
        lines += [f"{f.severity:<5} principle {f.principle} {f.node}: {f.message}" for f in findings]
        text = "\n".join(lines)
    _emit(text, args.out)
    if args.format == "csv":
        for f in findings:
            print(f"{f.severity} principle {f.principle} {f.node}: {f.message}", file=sys.stderr)
    return EXIT_LINT if any(f.severity == "error" for f in findings) else EXIT_OK


def cmd_rewrite(args) -> int:
    arch = _load_arch(args.arch)
    reports = []
    for name in args.passes:
        name = PASS_ALIASES.get(name, name)
        try:
            rule = rewrite.RewriteRule(name, n=args.n, alpha=args.alpha, force=args.force,
                                       first_activation="linear" if args.linear_first else "relu")
        except ValueError as e:
            raise InputError(str(e)) from None
        arch, rep = rewrite.apply_rule(arch, rule)
        reports.append(rep)
    text = archfile.dumps(arch)
    assert archfile.loads(text) == arch
    if args.out:
        Path(args.out).write_text(text)
    for rep in reports:
        if args.format == "json":
            print(rep.to_json())
        elif args.format == "csv":
            print(rep.to_csv(), end="")
        else:
            print(rep.to_table())
    if not args.out:
        print(text, end="")
    return EXIT_OK


def _train_config(args) -> train.TrainConfig:
    base = train.PRESETS[args.preset]
    sched = base.schedule
    opt = base.optimizer
    if args.optimizer:
        opt = train.OptimizerConfig(args.optimizer)
    sched = train.ScheduleConfig(args.lr if args.lr is not None else sched.base_lr,
                                 args.lr_decay if args.lr_decay is not None else sched.decay_rate,
                                 args.lr_decay_epochs if args.lr_decay_epochs is not None else sched.decay_every_epochs)
    clip = base.clip
    if args.clip is not None:
        clip = train.ClipConfig(args.clip) if args.clip > 0 else None

    def pick(value, default):
        return default if value is None else value

    return train.TrainConfig(
        epochs=pick(args.epochs, base.epochs), batch=pick(args.batch, base.batch),
        smoothing=pick(args.label_smoothing, base.smoothing), optimizer=opt, schedule=sched, clip=clip,
        ema_decay=pick(args.ema_decay, base.ema_decay), aux_weight=pick(args.aux_weight, base.aux_weight),
        seed=pick(args.seed, base.seed), precision=pick(args.precision, base.precision),
        single_thread=not args.multi_thread)


def cmd_train(args) -> int:
    arch = _load_arch(args.arch)
    ds = _load_data(args.data)
    val = _load_data(args.val) if args.val else None
    if ds.num_classes > arch.classes:
        raise InputError(f"dataset labels reach {ds.num_classes - 1} but {args.arch} has {arch.classes} classes")
    try:
        cfg = _train_config(args)
    except ValueError as e:
        raise InputError(str(e)) from None
    log = None if args.quiet else (lambda s: print(s, flush=True))
    try:
        result = train.train_loop(arch, ds, cfg, val=val, log=log)
    except train.DivergenceError as e:
        print(f"error: {e}", file=sys.stderr)
        return EXIT_DIVERGED
    checkpoint.save(args.out, train.checkpoint_tensors(result))
    history = args.history or f"{args.out}.history.csv"
    Path(history).write_text(result.history.to_csv())
    print(f"final train_acc {result.history.final_train_acc:.4f} loss {result.history.rows[-1]['loss']:.5f} "
          f"({result.history.wall_time:.1f}s); wrote {args.out} and {history}")
    return EXIT_OK


def cmd_eval(args) -> int:
    arch = _load_arch(args.arch)
    ds = _load_data(args.data)
    graph, out = build_network(arch, batch=1)
    try:
        tensors = checkpoint.load(args.checkpoint)
        checkpoint.check_matches(tensors, train.expected_checkpoint(graph))
    except (OSError, checkpoint.CheckpointError) as e:
        raise InputError(f"checkpoint {args.checkpoint}: {e}") from None
    train.load_into(graph, tensors, use_ema=args.use_ema)
    acc, loss = train.evaluate(graph, out["logits"], ds)
    print(f"accuracy {acc:.4f} loss {loss:.5f} ({'ema' if args.use_ema else 'raw'} weights, {len(ds)} examples)")
    return EXIT_OK


def cmd_demo_lowres(args) -> int:
    arch = _load_arch(args.arch) if args.arch else None
    costs = verify.stem_costs(arch)
    full = verify.stem_costs(arch, mode="full")
    print(f"{'stem':<16} {'input':>9} {'mult_adds':>16} {'pool share':>11}")
    for v in STEM_VARIANTS:
        h = with_stem(arch or archfile.load(archfile.bundled("v3")), v).input_shape[0]
        print(f"{v:<16} {h:>4}x{h:<4} {costs[v].total_mult_adds:>16,} {verify.pooling_share(full[v]):>10.3%}")
    print("pairwise cost ratios:")
    for a in STEM_VARIANTS:
        row = "  ".join(f"{costs[a].total_mult_adds / costs[b].total_mult_adds:6.4f}" for b in STEM_VARIANTS)
        print(f"  {a:<16} {row}")
    dev = verify.parity_deviation(costs)
    share = max(verify.pooling_share(r) for r in full.values())
    ok = dev <= 0.05 and share < 0.01
    print(f"parity {'PASS' if dev <= 0.05 else 'FAIL'}: max deviation {dev:.4f} (limit 0.05)")
    print(f"pooling share {'PASS' if share < 0.01 else 'FAIL'}: {share:.3%} (limit 1%)")
    return EXIT_OK if ok else EXIT_INPUT


def cmd_verify(args) -> int:
    groups = [g for part in (args.filter or []) for g in part.split(",") if g]
    try:
        if args.inject_fault:
            with nnops.inject_fault(args.inject_fault):
                checks = verify.run(groups)
        else:
            checks = verify.run(groups)
    except ValueError as e:
        raise InputError(str(e)) from None
    for c in checks:
        print(c.line())
    failed = sum(not c.passed for c in checks)
    print(f"{len(checks) - failed}/{len(checks)} checks passed")
    return EXIT_OK if failed == 0 else EXIT_INPUT


def cmd_make_data(args) -> int:
    pixels, labels = data.synthetic_shapes(args.count, args.size, args.seed, args.classes)
    data.save(args.out, pixels, labels)
    print(f"wrote {args.count} images of {args.size}x{args.size} ({args.classes} classes) to {args.out}")
    return EXIT_OK


# -- argument parsing -------------------------------------------------------------------

class _Parser(argparse.ArgumentParser):
    # argparse exits 2 on usage errors, which would read as a lint failure
    def error(self, message):
        self.print_usage(sys.stderr)
        self.exit(EXIT_INPUT, f"{self.prog}: error: {message}\n")


def build_parser() -> argparse.ArgumentParser:
    p = _Parser(prog="inceptkit", description="Inception network cost analysis, rewriting and training.")
    sub = p.add_subparsers(dest="command", required=True)

    a = sub.add_parser("analyze", help="per-node cost, receptive fields and lint findings")
    a.add_argument("arch")
    a.add_argument("--format", choices=("table", "csv", "json"), default="table")
    a.add_argument("--batch", type=int, default=1)
    a.add_argument("--mode", choices=("default", "full"), default="default")
    a.add_argument("--include-aux", action="store_true")
    a.add_argument("--out")
    a.set_defaults(func=cmd_analyze)

    r = sub.add_parser("rewrite", help="apply factorisation passes")
    r.add_argument("arch")
    r.add_argument("--pass", dest="passes", action="append", required=True,
                   help=f"one of {list(rewrite.RULE_NAMES)} or {list(PASS_ALIASES)}")
    r.add_argument("--n", type=int, default=7, help="kernel length for factorize_nxn")
    r.add_argument("--alpha", choices=("none", "sqrt_split"), default="none")
    r.add_argument("--force", action="store_true", help="apply factorize_nxn outside grids 12..20")
    r.add_argument("--linear-first", action="store_true", help="no ReLU between factors")
    r.add_argument("--format", choices=("table", "csv", "json"), default="table")
    r.add_argument("--out")
    r.set_defaults(func=cmd_rewrite)

    t = sub.add_parser("train", help="train on an INCD dataset")
    t.add_argument("arch")
    t.add_argument("--data", required=True)
    t.add_argument("--val")
    t.add_argument("--preset", choices=sorted(train.PRESETS), default="tiny")
    t.add_argument("--epochs", type=int)
    t.add_argument("--batch", type=int)
    t.add_argument("--optimizer", choices=("momentum", "rmsprop"))
    t.add_argument("--label-smoothing", type=float)
    t.add_argument("--clip", type=float, help="global-norm threshold; 0 disables")
    t.add_argument("--lr", type=float)
    t.add_argument("--lr-decay", type=float)
    t.add_argument("--lr-decay-epochs", type=int)
    t.add_argument("--aux-weight", type=float)
    t.add_argument("--ema-decay", type=float)
    t.add_argument("--seed", type=int)
    t.add_argument("--precision", choices=("f32", "f64"))
    t.add_argument("--multi-thread", action="store_true", help="allow BLAS threads (not bitwise reproducible)")
    t.add_argument("--history")
    t.add_argument("--quiet", action="store_true")
    t.add_argument("--out", required=True)
    t.set_defaults(func=cmd_train)

    e = sub.add_parser("eval", help="accuracy and loss of a checkpoint")
    e.add_argument("arch")
    e.add_argument("checkpoint")
    e.add_argument("--data", required=True)
    e.add_argument("--use-ema", action="store_true")
    e.set_defaults(func=cmd_eval)

    d = sub.add_parser("demo-lowres", help="cost of the three low-resolution stems")
    d.add_argument("--arch")
    d.set_defaults(func=cmd_demo_lowres)

    v = sub.add_parser("verify", help="run the oracle suite")
    v.add_argument("--filter", action="append", help=f"groups: {','.join(verify.GROUPS)}")
    v.add_argument("--inject-fault", choices=("conv_stride",))
    v.set_defaults(func=cmd_verify)

    m = sub.add_parser("make-data", help="write the synthetic shapes dataset")
    m.add_argument("--out", required=True)
    m.add_argument("--count", type=int, default=256)
    m.add_argument("--size", type=int, default=32)
    m.add_argument("--seed", type=int, default=0)
    m.add_argument("--classes", type=int, default=10)
    m.set_defaults(func=cmd_make_data)
    return p


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    try:
        return args.func(args)
    except InputError as e:
        print(f"error: {e}", file=sys.stderr)
        return EXIT_INPUT


if __name__ == "__main__":
    sys.exit(main())
