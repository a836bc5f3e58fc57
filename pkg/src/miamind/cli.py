"""Command-line entry point: ``miamind <verb> [flags]``.

Exit status: 0 success, 1 domain error, 2 usage error.
"""
from __future__ import annotations

import argparse
import statistics
import sys
from pathlib import Path


from . import gradcheck, tasks
from .autograd import Graph
from .backbones import (
    VARIANTS, attention_param_count, layer_param_counts, model_forward, param_count,
)
from .data_io import load_checkpoint, save_checkpoint
from .errors import ConfigError, MiaError
from .mia_attention import DEFAULT_REDUCTION, param_count as block_param_count, write_pgm
from .train import TrainConfig, evaluate, train_loop

LOSS_CHOICES = {"auto": None, "cross-entropy": "cross_entropy", "dice": "dice",
                "dice-onehot": "dice_onehot"}


def _add_data_flags(p: argparse.ArgumentParser):
    p.add_argument("--task", choices=tasks.TASKS, default="synth-cls", help="dataset and host network")
    p.add_argument("--seed", type=int, default=0, help="model init, shuffling and synthetic data seed")
    p.add_argument("--n", type=int, default=None,
                   help="training samples (synth-cls 256, synth-seg 128, all rows otherwise)")
    p.add_argument("--noise", type=float, default=0.1, help="Gaussian noise std of synthetic images")
    p.add_argument("--data-dir", default=None, help="CIFAR-10 binary directory (default $MIA_DATA_DIR)")
    p.add_argument("--csv", default=None, help="flow CSV for --task flows")
    p.add_argument("--label-column", default="Label", help="label column of the flow CSV")


def _add_train_flags(p: argparse.ArgumentParser):
    p.add_argument("--variant", choices=VARIANTS, default="mia", help="attention variant")
    p.add_argument("--epochs", type=int, default=10, help="training epochs")
    p.add_argument("--lr", type=float, default=0.01, help="initial learning rate (cosine-annealed to 0)")
    p.add_argument("--batch", type=int, default=16, help="batch size")
    p.add_argument("--r", type=int, default=DEFAULT_REDUCTION, help="reduction ratio of the channel MLP")
    p.add_argument("--loss", choices=tuple(LOSS_CHOICES), default="auto",
                   help="auto: cross-entropy for classification, dice for segmentation")
    p.add_argument("--no-bias", action="store_true", help="drop the channel-MLP biases")


def build_parser() -> argparse.ArgumentParser:
    fmt = argparse.ArgumentDefaultsHelpFormatter
    parser = argparse.ArgumentParser(prog="miamind", formatter_class=fmt,
                                     description="Channel x spatial interactive attention toolkit")
    sub = parser.add_subparsers(dest="verb", required=True)

    p = sub.add_parser("train", formatter_class=fmt, help="train a model and write a checkpoint")
    _add_data_flags(p)
    _add_train_flags(p)
    p.add_argument("--out", default="model.ckpt", help="checkpoint path; .log and .png are written beside it")
    p.add_argument("--no-figures", action="store_true", help="skip the PNG figures")

    p = sub.add_parser("eval", formatter_class=fmt, help="evaluate a checkpoint on the task's test split")
    p.add_argument("--ckpt", required=True, help="checkpoint written by train")
    _add_data_flags(p)

    p = sub.add_parser("gradcheck", formatter_class=fmt, help="finite-difference check of every adjoint")
    p.add_argument("--full", action="store_true", help="also check the complete backbones")

    p = sub.add_parser("ablate", formatter_class=fmt, help="train mia / se_only / none on identical data")
    _add_data_flags(p)
    _add_train_flags(p)
    p.add_argument("--seeds", type=int, default=3, help="number of consecutive seeds")
    p.add_argument("--out-dir", default=None, help="write ablation.csv and ablation.png here")

    p = sub.add_parser("params", formatter_class=fmt, help="per-layer parameter audit")
    p.add_argument("--task", choices=tasks.TASKS, default="synth-cls", help="host network to audit")
    p.add_argument("--variant", choices=VARIANTS, default="mia", help="attention variant")
    p.add_argument("--r", type=int, default=DEFAULT_REDUCTION, help="reduction ratio")
    p.add_argument("--features", type=int, default=80, help="flow feature count for --task flows")

    p = sub.add_parser("export-attn", formatter_class=fmt, help="dump attention maps of one test sample")
    p.add_argument("--ckpt", required=True, help="checkpoint written by train")
    _add_data_flags(p)
    p.add_argument("--input", type=int, default=0, help="test-split sample index")
    p.add_argument("--out", default="attn", help="output directory")
    p.add_argument("--no-figures", action="store_true", help="skip the PNG figures")
    return parser


def _config(args, task: tasks.TaskData) -> TrainConfig:
    loss = LOSS_CHOICES[args.loss] or task.loss
    if task.train.task == "segmentation" and loss != "dice":
        raise ConfigError("segmentation tasks train with --loss dice")
    if task.train.task != "segmentation" and loss == "dice":
        raise ConfigError("use --loss dice-onehot for classification tasks")
    return TrainConfig(lr_init=args.lr, batch_size=args.batch, epochs=args.epochs,
                       loss_kind=loss, seed=args.seed)


def _prepare(args) -> tasks.TaskData:
    return tasks.prepare(args.task, args.seed, args.n, args.noise, args.data_dir, args.csv,
                         args.label_column)


def cmd_train(args, out) -> int:
    # validate the config before touching any data
    TrainConfig(lr_init=args.lr, batch_size=args.batch, epochs=args.epochs)
    task = _prepare(args)
    cfg = _config(args, task)
    model = task.build(args.variant, args.r, args.seed, not args.no_bias)
    lines = []

    def log(line):
        lines.append(line)
        print(line, file=out)

    records = train_loop(model, task.train, cfg, log)
    ckpt = Path(args.out)
    save_checkpoint(model, ckpt)
    Path(f"{ckpt}.log").write_text("\n".join(lines) + "\n")
    if not args.no_figures:
        from .plotting import plot_training_log
        plot_training_log(records, f"{ckpt}.png", f"{args.task} / {args.variant}")
    print(evaluate(model, task.test).to_text(), file=out)
    print(f"checkpoint={ckpt}", file=out)
    return 0


def cmd_eval(args, out) -> int:
    model = load_checkpoint(args.ckpt)
    task = _prepare(args)
    print(evaluate(model, task.test).to_text(), file=out)
    return 0


def cmd_gradcheck(args, out) -> int:
    results = gradcheck.run_all(full=args.full)
    for r in results:
        print(r.line(), file=out)
    ok = all(r.passed for r in results)
    print(f"gradcheck {'passed' if ok else 'FAILED'}: {sum(r.passed for r in results)}/{len(results)}",
          file=out)
    return 0 if ok else 1


ABLATION_FIELDS = ("variant", "seed", "params", "accuracy", "precision", "recall", "f1", "dice")


def _csv(row: dict) -> str:
    cells = []
    for k in ABLATION_FIELDS:
        v = row.get(k)
        cells.append("" if v is None else f"{v:.6f}" if isinstance(v, float) else str(v))
    return ",".join(cells)


def run_ablation(args, out=None) -> list[dict]:
    rows = []
    for seed in range(args.seed, args.seed + args.seeds):
        task = tasks.prepare(args.task, seed, args.n, args.noise, args.data_dir, args.csv,
                             args.label_column)
        cfg = _config(args, task)
        cfg.seed = seed
        for variant in VARIANTS:
            model = task.build(variant, args.r, seed, not args.no_bias)
            train_loop(model, task.train, cfg)
            rep = evaluate(model, task.test)
            row = {"variant": variant, "seed": seed, "params": param_count(model),
                   "accuracy": rep.accuracy, "precision": rep.precision, "recall": rep.recall,
                   "f1": rep.f1, "dice": rep.dice}
            rows.append(row)
            if out is not None:
                print(_csv(row), file=out, flush=True)
    return rows


def median_rows(rows: list[dict]) -> list[dict]:
    meds = []
    for variant in VARIANTS:
        sel = [r for r in rows if r["variant"] == variant]
        med = {"variant": variant, "seed": "median", "params": sel[0]["params"]}
        for k in ("accuracy", "precision", "recall", "f1", "dice"):
            vals = [r[k] for r in sel if r[k] is not None]
            med[k] = statistics.median(vals) if vals else None
        meds.append(med)
    return meds


def cmd_ablate(args, out) -> int:
    if args.seeds < 1:
        raise ConfigError("--seeds must be >= 1")
    TrainConfig(lr_init=args.lr, batch_size=args.batch, epochs=args.epochs)
    print(",".join(ABLATION_FIELDS), file=out)
    rows = run_ablation(args, out)
    meds = median_rows(rows)
    for m in meds:
        print(_csv(m), file=out)
    if args.out_dir:
        d = Path(args.out_dir)
        d.mkdir(parents=True, exist_ok=True)
        (d / "ablation.csv").write_text(
            "\n".join([",".join(ABLATION_FIELDS)] + [_csv(r) for r in rows + meds]) + "\n")
        from .plotting import plot_ablation
        metric = "dice" if rows[0]["dice"] is not None else "accuracy"
        plot_ablation(rows, d / "ablation.png", metric)
    return 0


def cmd_params(args, out) -> int:
    if args.task == "flows":
        from .backbones import build_flow_cnn
        model = build_flow_cnn(args.features, 2, args.variant, args.r)
    else:
        shapes = {"synth-cls": ((3, 16, 16), 4), "cifar": ((3, 32, 32), 10)}
        if args.task == "synth-seg":
            from .backbones import build_mini_segnet
            model = build_mini_segnet((1, 16, 16), args.variant, args.r)
        else:
            from .backbones import build_mini_cnn
            model = build_mini_cnn(*shapes[args.task], args.variant, args.r)
    print("layer,kind,params", file=out)
    for name, kind, count in layer_param_counts(model):
        print(f"{name},{kind},{count}", file=out)
    for name in model.mia_layers():
        block = model.mia_block(name)
        if block is None:
            print(f"mia_audit layer={name} disabled params=0", file=out)
            continue
        print(f"mia_audit layer={name} C={block.channels} r={block.reduction} hidden={block.hidden} "
              f"params={block_param_count(block)}", file=out)
    total = param_count(model)
    attn = attention_param_count(model)
    print(f"total_params={total}", file=out)
    print(f"attention_params={attn}", file=out)
    print(f"attention_fraction={attn / total:.6f}", file=out)
    return 0


def cmd_export_attn(args, out) -> int:
    model = load_checkpoint(args.ckpt)
    task = _prepare(args)
    if not 0 <= args.input < len(task.test):
        raise ConfigError(f"--input must lie in [0, {len(task.test)})")
    x = task.test.inputs[args.input:args.input + 1]
    record = {}
    model_forward(model, x, Graph(), record=record)
    if not record:
        raise ConfigError(f"variant {model.variant!r} has no enabled attention layers")
    d = Path(args.out)
    d.mkdir(parents=True, exist_ok=True)
    for layer, maps in record.items():
        wc = maps["wc"].value[0]
        ws = maps["ws"].value[0]
        A = maps["A"].value[0]
        (d / f"{layer}_wc.txt").write_text("".join(f"{v:.9f}\n" for v in wc))
        write_pgm(d / f"{layer}_ws.pgm", ws)
        for c in range(A.shape[0]):
            write_pgm(d / f"{layer}_A_c{c:02d}.pgm", A[c])
        print(f"{layer}: wc[{len(wc)}] ws{ws.shape} A{A.shape} -> {d}", file=out)
        if not args.no_figures:
            from .plotting import plot_attention
            feats = maps["z"].graph.nodes[maps["z"].inputs[0]].value[0]
            plot_attention(feats, wc, ws, d / f"{layer}.png", layer)
    return 0


COMMANDS = {"train": cmd_train, "eval": cmd_eval, "gradcheck": cmd_gradcheck, "ablate": cmd_ablate,
            "params": cmd_params, "export-attn": cmd_export_attn}


def run(argv=None, out=None) -> int:
    out = out if out is not None else sys.stdout
    try:
        args = build_parser().parse_args(argv)
    except SystemExit as e:
        return int(e.code or 0)
    try:
        return COMMANDS[args.verb](args, out)
    except MiaError as e:
        print(f"error: {type(e).__name__}: {e}", file=sys.stderr)
        return 1


def main():
    sys.exit(run())


if __name__ == "__main__":
    main()
