"""Command line entry point: ``seqkd <subcommand> [flags]``.

Every subcommand accepts ``--config FILE`` with ``key = value`` lines (keys are
flag names, with or without leading dashes); flags given on the command line
win over file values. Failures print one JSON line ``{"error": kind,
"message": ...}`` on stderr. Usage and parameter errors exit with 2, all other
failures with 1.
"""

from __future__ import annotations

import argparse
import json
import logging
import os
import sys
from dataclasses import replace
from pathlib import Path

import numpy as np

from . import corpus
from .distill import DistillConfig, distill
from .errors import ParameterError, SeqKDError
from .evaluate import evaluate
from .experiments import AXES, PipelineConfig, stability_experiment, sweep
from .model import INIT_MODES, ModelConfig, init_params, load_checkpoint, save_checkpoint
from .train import TrainConfig, train

log = logging.getLogger("seqkd")

PORT_ENV = "SEQKD_PORT"


class UsageError(Exception):
    pass


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        raise UsageError(message)


def read_config_file(path: str | Path) -> dict[str, str]:
    """Parse ``key = value`` lines; ``#`` starts a comment."""
    out = {}
    for lineno, raw in enumerate(Path(path).read_text(encoding="utf-8").splitlines(), 1):
        line = raw.split("#", 1)[0].strip()
        if not line:
            continue
        key, sep, value = line.partition("=")
        if not sep or not key.strip():
            raise ParameterError(f"{path}:{lineno}: expected 'key = value'")
        out[key.strip().lstrip("-").replace("-", "_")] = value.strip()
    return out


def _csv(kind):
    def parse(text: str):
        try:
            return [kind(v) for v in str(text).split(",") if v.strip()]
        except ValueError:
            raise argparse.ArgumentTypeError(f"bad list {text!r}") from None
    return parse


def _model_flags(p, layers, hidden, heads, dropout, prefix=""):
    dash = f"--{prefix}" if prefix else "--"
    p.add_argument(f"{dash}layers", type=int, default=layers)
    p.add_argument(f"{dash}hidden", type=int, default=hidden)
    p.add_argument(f"{dash}heads", type=int, default=heads)
    p.add_argument(f"{dash}ffn", type=int, default=None, help="feed-forward width (default 4*hidden)")
    p.add_argument(f"{dash}dropout", type=float, default=dropout)
    if not prefix:
        p.add_argument("--untied", action="store_true", help="separate output projection")


def _opt_flags(p, lr, rho):
    p.add_argument("--lr", type=float, default=lr)
    p.add_argument("--batch-size", type=int, default=32)
    p.add_argument("--max-epochs", type=int, default=150)
    p.add_argument("--patience", type=int, default=5)
    p.add_argument("--rho", type=float, default=rho)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--clip-norm", type=float, default=None)


def build_parser() -> argparse.ArgumentParser:
    parser = _Parser(prog="seqkd", description=__doc__.splitlines()[0])
    parser.add_argument("-v", "--verbose", action="store_true")
    sub = parser.add_subparsers(dest="command", required=True, parser_class=_Parser)

    p = sub.add_parser("prepare", help="interaction log -> SRDS1 dataset")
    p.add_argument("--input", required=True)
    p.add_argument("--format", choices=corpus.FORMATS, default="ml-1m")
    p.add_argument("--min-count", type=int, default=5)
    p.add_argument("--seed", type=int, default=0, help="token-map seed")
    p.add_argument("--max-len", type=int, default=50)
    p.add_argument("--output", required=True)
    p.add_argument("--tokenmap-out", default=None)

    p = sub.add_parser("train", help="masked-item training (stage one)")
    p.add_argument("--data", required=True)
    p.add_argument("--output", required=True, help="checkpoint path for the best model")
    _model_flags(p, 12, 768, 12, 0.1)
    _opt_flags(p, 2e-5, 0.55)
    p.add_argument("--init-mode", choices=INIT_MODES, default="scratch_all")
    p.add_argument("--init-checkpoint", default=None)
    p.add_argument("--init-seed", type=int, default=0)
    p.add_argument("--log", default=None, help="write epoch,step,loss,metric lines here")
    p.add_argument("--history", default=None, help="write the training history as JSON")

    p = sub.add_parser("distill", help="teacher -> student distillation (stage two)")
    p.add_argument("--data", required=True)
    p.add_argument("--teacher", required=True)
    p.add_argument("--output", required=True)
    _model_flags(p, 2, 256, 4, 0.1)
    _opt_flags(p, 1e-4, 0.35)
    p.add_argument("--alpha", type=float, default=0.5)
    p.add_argument("--temperature", type=float, default=1.5)
    p.add_argument("--init-seed", type=int, default=0)
    p.add_argument("--log", default=None)
    p.add_argument("--history", default=None)

    p = sub.add_parser("eval", help="HR@K / NDCG@K report")
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--data", required=True)
    p.add_argument("--split", choices=("val", "test"), default="test")
    p.add_argument("--ks", type=_csv(int), default=[5, 10])
    p.add_argument("--output", default=None, help="report path (default: stdout)")

    for name, helptext in (("sweep", "one-axis hyper-parameter sweep"),
                           ("stability", "repeat the pipeline under several token-map seeds")):
        p = sub.add_parser(name, help=helptext)
        if name == "sweep":
            p.add_argument("--data", required=True)
            p.add_argument("--axis", choices=AXES, required=True)
            p.add_argument("--values", required=True, help="comma separated")
            p.add_argument("--teacher", default=None, help="trained teacher checkpoint (distill stage)")
        else:
            p.add_argument("--input", required=True)
            p.add_argument("--format", choices=corpus.FORMATS, default="ml-1m")
            p.add_argument("--min-count", type=int, default=5)
            p.add_argument("--max-len", type=int, default=50)
            p.add_argument("--seeds", type=_csv(int), default=[1, 2, 3])
        p.add_argument("--stage", choices=("train", "distill"), default="train")
        _model_flags(p, 2, 256, 4, 0.1)
        _model_flags(p, 12, 768, 12, 0.1, prefix="teacher-")
        _opt_flags(p, 1e-4, 0.35)
        p.add_argument("--teacher-lr", type=float, default=2e-5)
        p.add_argument("--teacher-rho", type=float, default=0.55)
        p.add_argument("--alpha", type=float, default=0.5)
        p.add_argument("--temperature", type=float, default=1.5)
        p.add_argument("--init-mode", choices=INIT_MODES, default="scratch_all")
        p.add_argument("--init-checkpoint", default=None)
        p.add_argument("--init-seed", type=int, default=0)
        p.add_argument("--split", choices=("val", "test"), default="test")
        p.add_argument("--output", required=True, help="grid JSON path")

    p = sub.add_parser("serve", help="HTTP recommendation endpoint")
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--tokenmap", required=True, help="token-map JSON or SRDS1 dataset")
    p.add_argument("--host", default="127.0.0.1")
    p.add_argument("--port", type=int, default=None, help=f"default ${PORT_ENV} or 8000")
    p.add_argument("--deadline-ms", type=float, default=1000.0)
    p.add_argument("--max-inflight", type=int, default=8)

    p = sub.add_parser("bench", help="teacher vs student single-request latency")
    p.add_argument("--teacher", help="teacher checkpoint (in-process mode)")
    p.add_argument("--student", help="student checkpoint (in-process mode)")
    p.add_argument("--tokenmap", help="token-map JSON or SRDS1 dataset")
    p.add_argument("--teacher-url", help="running teacher server (HTTP mode)")
    p.add_argument("--student-url", help="running student server (HTTP mode)")
    p.add_argument("--trace", help="JSON lines, each a list of item ids")
    p.add_argument("--data", help="SRDS1 dataset to draw histories from when no trace is given")
    p.add_argument("--requests", type=int, default=200)
    p.add_argument("--warmup", type=int, default=10)
    p.add_argument("--k", type=int, default=10)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--output", default=None)

    for p in sub.choices.values():
        p.add_argument("--config", default=None, help="key = value file of flag defaults")
    return parser


def parse_args(argv) -> argparse.Namespace:
    parser = build_parser()
    args = parser.parse_args(argv)
    if args.config:
        values = read_config_file(args.config)
        subparser = parser._subparsers._group_actions[0].choices[args.command]
        known = {a.dest: a for a in subparser._actions}
        defaults = {}
        for key, raw in values.items():
            action = known.get(key)
            if action is None or key in ("config", "help"):
                raise ParameterError(f"unknown config key {key!r} for {args.command}")
            if action.nargs == 0:
                defaults[key] = raw.lower() in ("1", "true", "yes", "on")
            else:
                defaults[key] = action.type(raw) if action.type else raw
        subparser.set_defaults(**defaults)
        args = parser.parse_args(argv)
    return args


# ---------------------------------------------------------------------------
# subcommands
# ---------------------------------------------------------------------------


def _model_config(args, dataset, prefix="") -> ModelConfig:
    g = lambda k: getattr(args, prefix + k)  # noqa: E731
    return ModelConfig(
        num_layers=g("layers"), hidden_dim=g("hidden"), num_heads=g("heads"), ffn_dim=g("ffn"),
        dropout_rate=g("dropout"), tie_output_to_embedding=not getattr(args, "untied", False),
        vocab_size=dataset.vocab_size if dataset else 3, max_len=dataset.max_len if dataset else 50,
    )


def _train_config(args) -> TrainConfig:
    return TrainConfig(
        learning_rate=args.lr, batch_size=args.batch_size, max_epochs=args.max_epochs,
        patience=args.patience, rho=args.rho, seed=args.seed, clip_norm=args.clip_norm,
    )


def _distill_config(args) -> DistillConfig:
    return DistillConfig(
        alpha=args.alpha, temperature=args.temperature, rho=args.rho, learning_rate=args.lr,
        batch_size=args.batch_size, max_epochs=args.max_epochs, patience=args.patience,
        seed=args.seed, clip_norm=args.clip_norm,
    )


def _write_json(obj, path) -> None:
    text = json.dumps(obj, indent=2, sort_keys=True)
    if path:
        Path(path).write_text(text + "\n", encoding="utf-8")
    else:
        print(text)


def _open_log(path):
    return open(path, "w", encoding="utf-8") if path else None


def cmd_prepare(args) -> None:
    data = corpus.prepare_dataset(args.input, args.format, args.min_count, args.seed, args.max_len)
    corpus.save_dataset(data, args.output)
    if args.tokenmap_out:
        corpus.save_token_map(data.token_map, args.tokenmap_out)
    log.info("prepared %d users, vocab %d -> %s", data.num_users, data.vocab_size, args.output)


def cmd_train(args) -> None:
    tcfg = _train_config(args)  # validate before the expensive loads
    data = corpus.load_dataset(args.data)
    config = _model_config(args, data)
    params = init_params(config, args.init_seed, args.init_mode, args.init_checkpoint)
    stream = _open_log(args.log)
    try:
        best, history = train((params, config), data, tcfg, log_stream=stream,
                              checkpoint_path=args.output)
    finally:
        if stream:
            stream.close()
    save_checkpoint(best, config, args.output)
    if args.history:
        _write_json(history.to_json(), args.history)


def cmd_distill(args) -> None:
    dcfg = _distill_config(args)
    data = corpus.load_dataset(args.data)
    teacher = load_checkpoint(args.teacher)
    config = _model_config(args, data)
    student = init_params(config, args.init_seed)
    stream = _open_log(args.log)
    try:
        best, history = distill(teacher, (student, config), data, dcfg, log_stream=stream,
                                checkpoint_path=args.output)
    finally:
        if stream:
            stream.close()
    save_checkpoint(best, config, args.output)
    if args.history:
        _write_json(history.to_json(), args.history)


def cmd_eval(args) -> None:
    data = corpus.load_dataset(args.data)
    params, config = load_checkpoint(args.checkpoint)
    report = evaluate(params, config, data, args.split, tuple(args.ks))
    _write_json(report.to_json(), args.output)


def _pipeline_config(args) -> PipelineConfig:
    teacher_model = teacher_train = None
    if args.stage == "distill":
        teacher_model = _model_config(args, None, prefix="teacher_")
        teacher_train = replace(_train_config(args), learning_rate=args.teacher_lr, rho=args.teacher_rho)
    return PipelineConfig(
        model=_model_config(args, None), train=_train_config(args), stage=args.stage,
        distill=_distill_config(args), teacher_model=teacher_model, teacher_train=teacher_train,
        init_mode=args.init_mode, init_checkpoint=args.init_checkpoint, init_seed=args.init_seed,
        split=args.split,
    )


def cmd_sweep(args) -> None:
    cfg = _pipeline_config(args)
    kind = str if args.axis == "init_mode" else int if args.axis == "mapping_seed" else float
    values = _csv(kind)(args.values)
    data = corpus.load_dataset(args.data)
    teacher = load_checkpoint(args.teacher) if args.teacher else None
    grid = sweep(args.axis, values, cfg, data, teacher)
    _write_json(grid.to_json(), args.output)


def cmd_stability(args) -> None:
    cfg = _pipeline_config(args)
    interactions = corpus.filter_min_count(
        corpus.load_interactions(args.input, args.format), args.min_count
    )
    grid = stability_experiment(interactions, args.seeds, cfg, n=args.max_len)
    _write_json(grid.to_json(), args.output)


def cmd_serve(args) -> None:
    import uvicorn

    from .service import ServingBundle, create_app

    port = args.port if args.port is not None else int(os.environ.get(PORT_ENV, "8000"))
    bundle = ServingBundle.load(args.checkpoint, args.tokenmap)
    app = create_app(bundle, deadline_ms=args.deadline_ms, max_inflight=args.max_inflight)
    uvicorn.run(app, host=args.host, port=port, log_level="info")


def _load_trace(args, token_map) -> list[list]:
    if args.trace:
        trace = []
        for line in Path(args.trace).read_text(encoding="utf-8").splitlines():
            if line.strip():
                obj = json.loads(line)
                trace.append(obj["items"] if isinstance(obj, dict) else obj)
        return trace
    if not args.data:
        raise ParameterError("bench needs --trace or --data")
    data = corpus.load_dataset(args.data)
    rng = np.random.default_rng(args.seed)
    users = rng.integers(data.num_users, size=args.requests)
    return [data.token_map.decode(data.history(int(u), "test")) for u in users]


def cmd_bench(args) -> None:
    from .service import bench, latency_report, replay, valid_trace

    if args.teacher_url or args.student_url:
        import httpx

        if not (args.teacher_url and args.student_url):
            raise ParameterError("HTTP mode needs both --teacher-url and --student-url")
        trace = [h for h in _load_trace(args, None) if h]
        if len(trace) <= args.warmup:
            raise ParameterError("trace has no requests beyond warmup")
        reports = []
        with httpx.Client(timeout=30.0) as client:
            for label, url in (("teacher", args.teacher_url), ("student", args.student_url)):
                endpoint = url.rstrip("/") + "/recommend"

                def call(history, endpoint=endpoint):
                    client.post(endpoint, json={"items": history, "k": args.k}).raise_for_status()

                reports.append(latency_report(label, replay(call, trace, args.warmup)))
        result = {"teacher": reports[0].to_json(), "student": reports[1].to_json(),
                  "student_over_teacher_p50": reports[1].p50_us / reports[0].p50_us}
        _write_json(result, args.output)
        return

    from .service import ServingBundle

    if not (args.teacher and args.student and args.tokenmap):
        raise ParameterError("in-process bench needs --teacher, --student and --tokenmap")
    teacher = ServingBundle.load(args.teacher, args.tokenmap, "teacher")
    student = ServingBundle.load(args.student, args.tokenmap, "student")
    trace = valid_trace(_load_trace(args, teacher.token_map), teacher.token_map)
    _write_json(bench(teacher, student, trace, args.warmup, args.k).to_json(), args.output)


COMMANDS = {
    "prepare": cmd_prepare, "train": cmd_train, "distill": cmd_distill, "eval": cmd_eval,
    "sweep": cmd_sweep, "stability": cmd_stability, "serve": cmd_serve, "bench": cmd_bench,
}


def _fail(kind: str, message: str, code: int) -> int:
    print(json.dumps({"error": kind, "message": " ".join(str(message).split())}), file=sys.stderr)
    return code


def main(argv=None) -> int:
    argv = sys.argv[1:] if argv is None else list(argv)
    try:
        args = parse_args(argv)
    except UsageError as exc:
        return _fail("usage", str(exc), 2)
    except SeqKDError as exc:
        return _fail(exc.kind, str(exc), 2)
    except OSError as exc:
        return _fail("io", str(exc), 1)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        COMMANDS[args.command](args)
    except (ParameterError, UsageError) as exc:
        return _fail(getattr(exc, "kind", "usage"), str(exc), 2)
    except SeqKDError as exc:
        return _fail(exc.kind, str(exc), 1)
    except (OSError, json.JSONDecodeError) as exc:
        return _fail("io", str(exc), 1)
    return 0


if __name__ == "__main__":
    sys.exit(main())
