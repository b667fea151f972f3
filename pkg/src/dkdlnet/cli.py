"""Command line client for the pipeline service.

Every subcommand builds a request, posts it to the service and renders
the response.  By default the service app is mounted in-process against
the local work directory; pass ``--server URL`` (or set ``DKDL_SERVER``)
to talk to a running instance instead.

Exit codes: 0 success, 1 usage error, 2 data error (missing or
malformed inputs), 3 training divergence.
"""

import argparse
import json
import os
import sys
from pathlib import Path

from .train import TrainConfig

EXIT_USAGE = 1
EXIT_DATA = 2
EXIT_DIVERGENCE = 3
_EXIT_BY_KIND = {"usage": EXIT_USAGE, "data": EXIT_DATA, "divergence": EXIT_DIVERGENCE}


class CommandError(Exception):
    """A failed service call, tagged with the exit-code vocabulary."""

    def __init__(self, kind, message):
        super().__init__(message)
        self.kind = kind
        self.message = message


class _Parser(argparse.ArgumentParser):
    # argparse exits 2 on bad flags; our contract reserves 2 for data errors.
    def error(self, message):
        self.print_usage(sys.stderr)
        print(f"{self.prog}: error: {message}", file=sys.stderr)
        raise SystemExit(EXIT_USAGE)


class _HelpFmt(argparse.ArgumentDefaultsHelpFormatter,
               argparse.RawDescriptionHelpFormatter):
    pass


def _config_epilog():
    lines = ["configuration keys (JSON --config file, overridden by --set KEY=VALUE):"]
    for key, value in TrainConfig().to_flat().items():
        lines.append(f"  {key:<24} default {value!r}")
    return "\n".join(lines)


def build_parser() -> argparse.ArgumentParser:
    parser = _Parser(
        prog="dkdlnet",
        description="Bearing fault diagnosis pipeline: synthesize or ingest data, "
                    "train the teacher, distill the student, fine-tune adapters, "
                    "then evaluate and benchmark.",
    )
    common = _Parser(add_help=False)
    common.add_argument("--work-dir", default=None,
                        help="artifact directory (env DKDL_WORK_DIR, default ./dkdl-work)")
    common.add_argument("--server", default=None,
                        help="URL of a running service (env DKDL_SERVER); "
                             "default runs in-process")

    trainish = _Parser(add_help=False)
    trainish.add_argument("--manifest", default="cache/synth.json",
                          help="dataset manifest, relative to the work dir")
    trainish.add_argument("--config", default=None,
                          help="JSON file of configuration keys (flat, dotted)")
    trainish.add_argument("--set", dest="overrides", action="append", default=[],
                          metavar="KEY=VALUE",
                          help="override one configuration key; beats --config")
    trainish.add_argument("--seed", type=int, default=None,
                          help="shortcut for --set seed=N; beats both")
    trainish.add_argument("--tag", default=None,
                          help="base name for the checkpoint and run log")

    sub = parser.add_subparsers(dest="command", metavar="COMMAND",
                                required=True, parser_class=_Parser)

    p = sub.add_parser("serve", parents=[common], formatter_class=_HelpFmt,
                       help="run the service over HTTP")
    p.add_argument("--host", default="127.0.0.1")
    p.add_argument("--port", type=int, default=8000)

    p = sub.add_parser("synth", parents=[common], formatter_class=_HelpFmt,
                       help="generate the synthetic ten-class dataset")
    p.add_argument("--per-class", type=int, default=280,
                   help="windows per class before the split")
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--split-ratio", type=float, default=0.8)
    p.add_argument("--name", default="synth", help="manifest name under cache/")

    p = sub.add_parser("ingest", parents=[common], formatter_class=_HelpFmt,
                       help="ingest a directory of MAT recordings")
    p.add_argument("data_dir", help="directory of .mat files")
    p.add_argument("--split-ratio", type=float, default=0.8)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--windows-per-class", type=int, default=280)
    p.add_argument("--label-map", default=None,
                   help="glob<TAB>label<TAB>fault_size file; default looks for "
                        "labels.tsv in the data directory")
    p.add_argument("--name", default="cwru", help="manifest name under cache/")

    sub.add_parser("train-teacher", parents=[common, trainish],
                   formatter_class=_HelpFmt, epilog=_config_epilog(),
                   help="train the six-block CNN teacher")

    p = sub.add_parser("distill", parents=[common, trainish],
                       formatter_class=_HelpFmt, epilog=_config_epilog(),
                       help="distill the teacher into the single-layer student")
    p.add_argument("--teacher", default="checkpoints/teacher.ckpt",
                   help="teacher checkpoint")

    p = sub.add_parser("finetune", parents=[common, trainish],
                       formatter_class=_HelpFmt, epilog=_config_epilog(),
                       help="attach low-rank adapters to the student and fine-tune")
    p.add_argument("--student", default="checkpoints/student.ckpt",
                   help="student checkpoint")

    p = sub.add_parser("merge", parents=[common], formatter_class=_HelpFmt,
                       help="fold adapters into base weights")
    p.add_argument("checkpoint", nargs="?", default="checkpoints/dkdl-net.ckpt",
                   help="checkpoint with unmerged adapters")
    p.add_argument("--output", default=None,
                   help="output path; default <stem>-merged.ckpt under checkpoints/")

    p = sub.add_parser("eval", parents=[common], formatter_class=_HelpFmt,
                       help="evaluate a checkpoint and write report artifacts")
    p.add_argument("checkpoint", help="checkpoint to evaluate")
    p.add_argument("--manifest", default="cache/synth.json")
    p.add_argument("--split", default="test", choices=("train", "test"))
    p.add_argument("--batch-size", type=int, default=256)
    p.add_argument("--svg", action="store_true", help="also write SVG plots")
    p.add_argument("--stem", default=None,
                   help="artifact base name; default <checkpoint>-<split>")

    p = sub.add_parser("bench", parents=[common], formatter_class=_HelpFmt,
                       help="single-threaded per-sample latency benchmark")
    p.add_argument("checkpoints", nargs="+", help="checkpoints to compare")
    p.add_argument("--num-samples", type=int, default=2500)
    p.add_argument("--warmup", type=int, default=100)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--name", default="latency", help="report name under reports/")

    p = sub.add_parser("describe", parents=[common], formatter_class=_HelpFmt,
                       help="print the layer table of a model or checkpoint")
    p.add_argument("target",
                   help="teacher, student, dkdl-net, or a checkpoint path")
    p.add_argument("--rank", type=int, default=12,
                   help="adapter rank when describing dkdl-net by name")
    p.add_argument("--pooling", default="max", choices=("max", "avg"))

    return parser


# ---------------------------------------------------------------------------
# Service transport


class ServiceClient:
    """POSTs requests and turns error payloads into CommandError."""

    def __init__(self, work_dir, server=None):
        if server:
            import httpx

            self._client = httpx.Client(base_url=server, timeout=None)
        else:
            from fastapi.testclient import TestClient

            from .service import create_app

            self._client = TestClient(create_app(work_dir),
                                      raise_server_exceptions=False)

    def post(self, path, payload):
        return self._handle(self._client.post(path, json=payload))

    def get(self, path):
        return self._handle(self._client.get(path))

    def close(self):
        self._client.close()

    @staticmethod
    def _handle(response):
        if response.status_code == 200:
            return response.json()
        kind = "data"
        message = f"service returned HTTP {response.status_code}"
        try:
            detail = response.json().get("detail")
        except ValueError:
            detail = None
        if isinstance(detail, dict):
            kind = detail.get("kind", kind)
            message = detail.get("message", message)
        elif isinstance(detail, str):
            message = detail
        raise CommandError(kind, message)


# ---------------------------------------------------------------------------
# Subcommand handlers


def _merge_config(args):
    cfg = {}
    if args.config:
        path = Path(args.config)
        try:
            loaded = json.loads(path.read_text())
        except OSError as exc:
            raise CommandError("usage", f"cannot read config file: {exc}") from None
        except json.JSONDecodeError as exc:
            raise CommandError(
                "usage", f"config file {path} is not valid JSON: {exc}"
            ) from None
        if not isinstance(loaded, dict):
            raise CommandError("usage", f"config file {path} must hold a JSON object")
        cfg.update(loaded)
    for item in args.overrides:
        key, sep, value = item.partition("=")
        if not sep or not key:
            raise CommandError("usage", f"--set expects KEY=VALUE, got {item!r}")
        cfg[key] = value
    if args.seed is not None:
        cfg["seed"] = args.seed
    return cfg


def _print_files(doc):
    for name in doc["files"]:
        print(f"wrote {name}")


def _print_dataset(doc):
    _print_files(doc)
    counts = doc["class_counts"]
    n_train = sum(counts["train"].values())
    n_test = sum(counts["test"].values())
    print(f"dataset {doc['hash'][:12]} ({doc['source']}): "
          f"{n_train} train / {n_test} test windows")


def _print_train(doc):
    metrics = doc["best_metrics"]
    parts = [f"best epoch {doc['best_epoch']} of {doc['epochs_run']}"]
    if metrics.get("eval_acc") is not None:
        parts.append(f"eval_acc {metrics['eval_acc']:.4f}")
    if metrics.get("train_loss") is not None:
        parts.append(f"train_loss {metrics['train_loss']:.4f}")
    print(f"{doc['procedure']} ({doc['model_name']}): " + ", ".join(parts))


def _cmd_synth(args, client):
    _print_dataset(client.post("/synth", {
        "per_class": args.per_class,
        "seed": args.seed,
        "split_ratio": args.split_ratio,
        "name": args.name,
    }))
    return 0


def _cmd_ingest(args, client):
    _print_dataset(client.post("/ingest", {
        "data_dir": str(Path(args.data_dir).absolute()),
        "split_ratio": args.split_ratio,
        "seed": args.seed,
        "windows_per_class": args.windows_per_class,
        "label_map": None if args.label_map is None
        else str(Path(args.label_map).absolute()),
        "name": args.name,
    }))
    return 0


def _cmd_train_teacher(args, client):
    _print_train_cmd(args, client, "/train-teacher", {}, "teacher")
    return 0


def _cmd_distill(args, client):
    _print_train_cmd(args, client, "/distill", {"teacher": args.teacher}, "student")
    return 0


def _cmd_finetune(args, client):
    _print_train_cmd(args, client, "/finetune", {"student": args.student}, "dkdl-net")
    return 0


def _print_train_cmd(args, client, route, extra, default_tag):
    payload = {
        "manifest": args.manifest,
        "config": _merge_config(args),
        "tag": args.tag or default_tag,
        **extra,
    }
    doc = client.post(route, payload)
    _print_files(doc)
    _print_train(doc)


def _cmd_merge(args, client):
    doc = client.post("/merge", {
        "checkpoint": args.checkpoint,
        "output": args.output,
    })
    _print_files(doc)
    print(f"merged adapters of {doc['model_name']} into {doc['output']}")
    return 0


def _cmd_eval(args, client):
    doc = client.post("/eval", {
        "checkpoint": args.checkpoint,
        "manifest": args.manifest,
        "split": args.split,
        "batch_size": args.batch_size,
        "svg": args.svg,
        "stem": args.stem,
    })
    _print_files(doc)
    report = doc["report"]
    print(f"{report['model']} on {report['split']}: "
          f"accuracy {report['accuracy']:.4f}, "
          f"macro-F1 {report['macro_f1']:.4f}, "
          f"micro-F1 {report['micro_f1']:.4f} "
          f"({report['num_samples']} samples)")
    return 0


def _cmd_bench(args, client):
    doc = client.post("/bench", {
        "checkpoints": args.checkpoints,
        "num_samples": args.num_samples,
        "warmup": args.warmup,
        "seed": args.seed,
        "name": args.name,
    })
    _print_files(doc)
    for row in doc["reports"]:
        print(f"{row['model']}: mean {row['mean_us']:.1f} us, "
              f"median {row['median_us']:.1f} us, p95 {row['p95_us']:.1f} us "
              f"({row['num_samples']} samples, cpu: {row['cpu_model']})")
    return 0


def _cmd_describe(args, client):
    doc = client.post("/describe", {
        "target": args.target,
        "rank": args.rank,
        "pooling": args.pooling,
    })
    print(doc["text"])
    return 0


def _cmd_serve(args, work_dir):
    import uvicorn

    from .service import create_app

    uvicorn.run(create_app(work_dir), host=args.host, port=args.port)
    return 0


_HANDLERS = {
    "synth": _cmd_synth,
    "ingest": _cmd_ingest,
    "train-teacher": _cmd_train_teacher,
    "distill": _cmd_distill,
    "finetune": _cmd_finetune,
    "merge": _cmd_merge,
    "eval": _cmd_eval,
    "bench": _cmd_bench,
    "describe": _cmd_describe,
}


def main(argv=None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as exc:
        return int(exc.code or 0)
    work_dir = args.work_dir or os.environ.get("DKDL_WORK_DIR") or "dkdl-work"
    if args.command == "serve":
        return _cmd_serve(args, work_dir)
    server = args.server or os.environ.get("DKDL_SERVER")
    client = ServiceClient(work_dir, server=server)
    try:
        return _HANDLERS[args.command](args, client)
    except CommandError as exc:
        print(f"dkdlnet {args.command}: error: {exc.message}", file=sys.stderr)
        return _EXIT_BY_KIND.get(exc.kind, EXIT_DATA)
    finally:
        client.close()


if __name__ == "__main__":
    sys.exit(main())
