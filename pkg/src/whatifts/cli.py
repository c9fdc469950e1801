"""Command line interface.

Exit codes: 0 success, 2 usage error (argparse), 3 data error,
4 checkpoint error.

Environment: WHATIFTS_SEED supplies the default --seed, WHATIFTS_DATA_DIR
the default --data directory.
"""

from __future__ import annotations

import argparse
import json
import os
import sys
from pathlib import Path

from .checkpoint import ForecasterBundle, checkpoint_id
from .counterfactual import CfConfig, construct_counterfactual, finetune
from .data_model import load_dataset, save_dataset
from .dttc import DttcBundle, DttcTrainConfig, train_dttc
from .errors import CheckpointError, DataError
from .evaluation import evaluate, export_initial_noise, write_report
from .inference import ForecastRequest, forecast
from .synthgen import generate_dataset
from .textproc import Vocab, build_vocab
from .training import TrainConfig, train

__all__ = ["main", "build_parser"]


def _env_seed() -> int:
    raw = os.environ.get("WHATIFTS_SEED")
    return int(raw) if raw else 0


def _env_data() -> str | None:
    return os.environ.get("WHATIFTS_DATA_DIR") or None


def _add_data_arg(parser: argparse.ArgumentParser, required: bool = True) -> None:
    default = _env_data()
    parser.add_argument(
        "--data",
        default=default,
        required=required and default is None,
        help="dataset directory (default: WHATIFTS_DATA_DIR)",
    )


def _load_config(cls, path: str | None):
    if path is None:
        return cls()
    p = Path(path)
    if not p.is_file():
        raise DataError(f"missing config file {p}")
    return cls.from_json(json.loads(p.read_text()))


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="whatifts",
        description="Counterfactual time series forecasting with textual conditions",
    )
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("gen-synth", help="generate the synthetic benchmark dataset")
    p.add_argument("--n", type=int, default=14000)
    p.add_argument("--history-len", type=int, default=128)
    p.add_argument("--future-len", type=int, default=128)
    p.add_argument("--seed", type=int, default=_env_seed())
    p.add_argument("--name", default="synth")
    p.add_argument("--out", required=True)

    p = sub.add_parser("build-vocab", help="build the token vocabulary from a dataset")
    _add_data_arg(p)
    p.add_argument("--out", default=None, help="default: <data>/vocab.json")
    p.add_argument("--min-freq", type=int, default=1)

    p = sub.add_parser("train", help="train the forecaster")
    _add_data_arg(p)
    p.add_argument("--out", required=True)
    p.add_argument("--config", default=None, help="JSON file of TrainConfig fields")
    p.add_argument("--epochs", type=int, default=None)
    p.add_argument("--batch-size", type=int, default=None)
    p.add_argument("--seed", type=int, default=None)

    p = sub.add_parser("train-dttc", help="train the consistency metric model")
    _add_data_arg(p)
    p.add_argument("--out", required=True)
    p.add_argument("--config", default=None, help="JSON file of DttcTrainConfig fields")
    p.add_argument("--epochs", type=int, default=None)
    p.add_argument("--batch-size", type=int, default=None)
    p.add_argument("--seed", type=int, default=None)

    p = sub.add_parser("make-cf", help="construct the counterfactual dataset")
    _add_data_arg(p)
    p.add_argument("--dttc", required=True, help="consistency model checkpoint")
    p.add_argument("--out", required=True)
    p.add_argument("--candidates", type=int, default=10)
    p.add_argument("--seed", type=int, default=_env_seed())

    p = sub.add_parser("finetune", help="finetune on counterfactual consistency")
    _add_data_arg(p)
    p.add_argument("--cf-data", required=True, help="counterfactual dataset directory")
    p.add_argument("--ckpt", required=True, help="forecaster checkpoint to start from")
    p.add_argument("--dttc", required=True)
    p.add_argument("--out", required=True)
    p.add_argument("--config", default=None, help="JSON file of CfConfig fields")
    p.add_argument("--epochs", type=int, default=None)
    p.add_argument("--seed", type=int, default=None)

    p = sub.add_parser("eval", help="evaluate a checkpoint on the test split")
    _add_data_arg(p)
    p.add_argument("--ckpt", required=True)
    p.add_argument("--dttc", required=True)
    p.add_argument("--setting", choices=["factual", "counterfactual"], default="factual")
    p.add_argument("--num-samples", type=int, default=1)
    p.add_argument("--seed", type=int, default=_env_seed())
    p.add_argument("--steps", type=int, default=None)
    p.add_argument("--no-attribution", action="store_true")
    p.add_argument("--out", default=None, help="report path (default: stdout)")

    p = sub.add_parser("export-noise", help="export attributed terminal states")
    _add_data_arg(p)
    p.add_argument("--ckpt", required=True)
    p.add_argument("--split", choices=["train", "val", "test"], default="test")
    p.add_argument("--out", required=True)
    p.add_argument("--seed", type=int, default=_env_seed())

    p = sub.add_parser("forecast", help="forecast one window from a JSON file")
    p.add_argument("--ckpt", required=True)
    p.add_argument("--history-file", required=True, help="JSON: [floats] or {history, history_text}")
    p.add_argument("--history-text", default=None)
    p.add_argument("--future-text", required=True)
    p.add_argument("--horizon", type=int, default=None, help="default: history length")
    p.add_argument("--num-samples", type=int, default=1)
    p.add_argument("--seed", type=int, default=_env_seed())
    p.add_argument("--no-attribution", action="store_true")
    p.add_argument("--out", default=None, help="output path (default: stdout)")

    p = sub.add_parser("serve", help="serve the HTTP forecasting API")
    _add_data_arg(p, required=False)
    p.add_argument("--ckpt", required=True)
    p.add_argument("--dttc", default=None)
    p.add_argument("--host", default="127.0.0.1")
    p.add_argument("--port", type=int, default=8000)

    return parser


def _cmd_gen_synth(args) -> int:
    dataset = generate_dataset(
        n=args.n,
        L_h=args.history_len,
        L_f=args.future_len,
        seed=args.seed,
        name=args.name,
    )
    save_dataset(dataset, args.out)
    counts = {k: len(v) for k, v in dataset.splits.items()}
    print(json.dumps({"out": str(args.out), "splits": counts}))
    return 0


def _cmd_build_vocab(args) -> int:
    dataset = load_dataset(args.data)
    corpus = [s.history_text for s in dataset.split("train")]
    corpus += [s.future_text for s in dataset.split("train")]
    vocab = build_vocab(corpus, min_freq=args.min_freq)
    out = Path(args.out) if args.out else Path(args.data) / "vocab.json"
    vocab.save(out)
    print(json.dumps({"out": str(out), "tokens": len(vocab) - 2}))
    return 0


def _cmd_train(args) -> int:
    dataset = load_dataset(args.data)
    config = _load_config(TrainConfig, args.config).with_overrides(
        epochs=args.epochs, batch_size=args.batch_size, seed=args.seed
    )
    vocab_path = Path(args.data) / "vocab.json"
    vocab = Vocab.load(vocab_path) if vocab_path.is_file() else None
    _, path = train(dataset, config, args.out, vocab=vocab)
    print(json.dumps({"checkpoint": str(path), "checkpoint_id": checkpoint_id(path)}))
    return 0


def _cmd_train_dttc(args) -> int:
    dataset = load_dataset(args.data)
    config = _load_config(DttcTrainConfig, args.config).with_overrides(
        epochs=args.epochs, batch_size=args.batch_size, seed=args.seed
    )
    _, path = train_dttc(dataset, config, args.out)
    print(json.dumps({"checkpoint": str(path), "checkpoint_id": checkpoint_id(path)}))
    return 0


def _cmd_make_cf(args) -> int:
    dataset = load_dataset(args.data)
    dttc = DttcBundle.load(args.dttc)
    cf = construct_counterfactual(
        dataset, dttc, num_candidates=args.candidates, seed=args.seed
    )
    save_dataset(cf, args.out)
    print(json.dumps({"out": str(args.out), "n": sum(len(v) for v in cf.splits.values())}))
    return 0


def _cmd_finetune(args) -> int:
    factual = load_dataset(args.data)
    cf = load_dataset(args.cf_data)
    bundle = ForecasterBundle.load(args.ckpt)
    dttc = DttcBundle.load(args.dttc)
    config = _load_config(CfConfig, args.config).with_overrides(
        epochs=args.epochs, seed=args.seed
    )
    _, path = finetune(
        factual, cf, bundle, dttc, config, args.out, parent_id=checkpoint_id(args.ckpt)
    )
    print(json.dumps({"checkpoint": str(path), "checkpoint_id": checkpoint_id(path)}))
    return 0


def _cmd_eval(args) -> int:
    dataset = load_dataset(args.data)
    bundle = ForecasterBundle.load(args.ckpt)
    dttc = DttcBundle.load(args.dttc)
    report = evaluate(
        bundle,
        dttc,
        dataset,
        setting=args.setting,
        num_samples=args.num_samples,
        seed=args.seed,
        use_attribution=not args.no_attribution,
        steps=args.steps,
        model_checkpoint=checkpoint_id(args.ckpt),
        dttc_checkpoint=checkpoint_id(args.dttc),
    )
    if args.out:
        write_report(report, args.out)
        print(json.dumps({"out": args.out}))
    else:
        print(json.dumps(report, indent=2))
    return 0


def _cmd_export_noise(args) -> int:
    dataset = load_dataset(args.data)
    bundle = ForecasterBundle.load(args.ckpt)
    out = export_initial_noise(bundle, dataset, args.split, args.out, seed=args.seed)
    print(json.dumps({"out": str(out)}))
    return 0


def _cmd_forecast(args) -> int:
    bundle = ForecasterBundle.load(args.ckpt)
    payload_path = Path(args.history_file)
    if not payload_path.is_file():
        raise DataError(f"missing history file {payload_path}")
    payload = json.loads(payload_path.read_text())
    if isinstance(payload, dict):
        history = payload.get("history")
        history_text = args.history_text or payload.get("history_text", "")
    else:
        history = payload
        history_text = args.history_text or ""
    if not isinstance(history, list) or not history:
        raise DataError("history file must hold a non-empty list of floats")
    if bundle.normalizer is None:
        raise CheckpointError("checkpoint carries no normalizer; cannot scale input")

    import numpy as np

    from .data_model import apply_normalizer

    raw = np.asarray(history, dtype=np.float64)
    request = ForecastRequest(
        history=apply_normalizer(bundle.normalizer, raw),
        history_text=history_text,
        future_text=args.future_text,
        horizon=args.horizon or len(history),
        num_samples=args.num_samples,
        use_attribution=not args.no_attribution,
        seed=args.seed,
    )
    result = forecast(bundle, request)
    out = {
        "forecasts": [[float(v) for v in row] for row in result.forecasts_raw],
        "forecasts_normalized": [[float(v) for v in row] for row in result.forecasts],
        "attribution_used": result.attribution_used,
    }
    text = json.dumps(out)
    if args.out:
        Path(args.out).write_text(text + "\n")
    else:
        print(text)
    return 0


def _cmd_serve(args) -> int:
    import uvicorn

    from .service import create_app

    app = create_app(args.ckpt, dttc_path=args.dttc, data_dir=args.data)
    uvicorn.run(app, host=args.host, port=args.port, log_level="warning")
    return 0


_COMMANDS = {
    "gen-synth": _cmd_gen_synth,
    "build-vocab": _cmd_build_vocab,
    "train": _cmd_train,
    "train-dttc": _cmd_train_dttc,
    "make-cf": _cmd_make_cf,
    "finetune": _cmd_finetune,
    "eval": _cmd_eval,
    "export-noise": _cmd_export_noise,
    "forecast": _cmd_forecast,
    "serve": _cmd_serve,
}


def main(argv: list[str] | None = None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    try:
        return _COMMANDS[args.command](args)
    except DataError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 3
    except CheckpointError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 4


if __name__ == "__main__":
    sys.exit(main())
