"""Command-line entry point: ``mgtraj {synth,train,eval,predict}``.

Exit codes: 0 success, 2 bad input, 3 numeric failure, 4 incompatible artifact.
"""

from __future__ import annotations

import argparse
import csv
import json
import logging
import sys
from pathlib import Path

import torch

from mgtraj import plots
from mgtraj.datamodel import ModelConfig
from mgtraj.evaluation import evaluate
from mgtraj.gan import CheckpointError
from mgtraj.ingest import SpecError, SynthSpec, TrackFormatError, dump_synthetic, load_dataset
from mgtraj.metrics import write_metrics_csv
from mgtraj.model import MGModel, batch_from_episodes, load_model, make_batch, predict, save_model
from mgtraj.training import NonFiniteLossError, TrainConfig, Trainer

log = logging.getLogger("mgtraj")

EXIT_OK, EXIT_INPUT, EXIT_NUMERIC, EXIT_ARTIFACT = 0, 2, 3, 4
SECTIONS = ("model", "train", "eval", "predict")
SAMPLE_COLUMNS = ("episode_id", "sample_idx", "generator_index", "t", "x", "y")


class InputError(Exception):
    pass


def _read_json(path) -> dict:
    try:
        data = json.loads(Path(path).read_text())
    except FileNotFoundError as exc:
        raise InputError(f"config file {path} not found") from exc
    except json.JSONDecodeError as exc:
        raise InputError(f"{path}: invalid JSON ({exc})") from exc
    if not isinstance(data, dict):
        raise InputError(f"{path}: expected a JSON object")
    return data


def load_config(path, seed=None) -> dict:
    """Sections of a run config; ``seed`` overrides both model and train seeds."""
    raw = _read_json(path) if path else {}
    unknown = set(raw) - set(SECTIONS)
    if unknown:
        raise InputError(f"unknown config sections: {sorted(unknown)}")
    model = dict(raw.get("model", {}))
    train = dict(raw.get("train", {}))
    if seed is not None:
        model["seed"] = train["seed"] = seed
    try:
        return {
            "model": ModelConfig.from_dict(model),
            "train": TrainConfig.from_dict(train),
            "eval": dict(raw.get("eval", {})),
            "predict": dict(raw.get("predict", {})),
        }
    except (TypeError, ValueError) as exc:
        raise InputError(f"config: {exc}") from exc


def _dataset(path, cfg: ModelConfig):
    if path is None:
        raise InputError("--data is required")
    try:
        return load_dataset(path, cfg.t_obs, cfg.t_fut)
    except FileNotFoundError as exc:
        raise InputError(str(exc)) from exc


def _out_dir(path) -> Path:
    if path is None:
        raise InputError("--out is required")
    out = Path(path)
    out.mkdir(parents=True, exist_ok=True)
    return out


def _checkpoint(args) -> tuple[MGModel, dict]:
    if args.checkpoint is None:
        raise InputError("--checkpoint is required")
    if not Path(args.checkpoint).exists():
        raise InputError(f"checkpoint {args.checkpoint} not found")
    model, extra = load_model(args.checkpoint)
    if args.config:
        load_config(args.config)  # validate sections
        wanted = _read_json(args.config).get("model", {}).get("n_G")
        if wanted is not None and wanted != model.cfg.n_G:
            raise CheckpointError(f"config asks for n_G={wanted}, checkpoint has n_G={model.cfg.n_G}")
    model.eval()
    return model, extra


# ---------------------------------------------------------------------------
# commands


def cmd_synth(args) -> int:
    raw = _read_json(args.config) if args.config else {}
    if args.seed is not None:
        raw["seed"] = args.seed
    spec = SynthSpec.from_dict(raw)
    for p in dump_synthetic(_out_dir(args.out), spec):
        print(p)
    return EXIT_OK


def cmd_train(args) -> int:
    cfg = load_config(args.config, args.seed)
    mcfg, tcfg = cfg["model"], cfg["train"]
    ds = _dataset(args.data, mcfg)
    out = _out_dir(args.out)
    if not ds.episodes:
        raise InputError(f"{args.data}: no complete {mcfg.t_obs}+{mcfg.t_fut} windows to train on")
    data = batch_from_episodes(ds.episodes, ds.scene, mcfg)
    model = MGModel.build(mcfg)
    trainer = Trainer(model, data, tcfg)

    def checkpoint(iteration):
        save_model(out / f"model_{iteration:06d}.ckpt", model, {"iteration": iteration, "train": tcfg.to_dict()})

    trainer.run(csv_path=out / "train.csv", on_checkpoint=checkpoint)
    save_model(out / "model.ckpt", model, {"iteration": trainer.iteration, "train": tcfg.to_dict()})
    log.info("trained %d iterations on %d targets", trainer.iteration, len(data))
    print(out / "model.ckpt")
    return EXIT_OK


def _default_eps(ds, eval_cfg) -> float:
    if "eps" in eval_cfg:
        return float(eval_cfg["eps"])
    if ds.synth is not None:
        return ds.synth.corridor_width / 2
    return 1.0


def cmd_eval(args) -> int:
    model, _ = _checkpoint(args)
    eval_cfg = load_config(args.config)["eval"] if args.config else {}
    ds = _dataset(args.data, model.cfg)
    out = _out_dir(args.out)
    episodes = [ds.episodes[i] for i in _select(ds.episodes, args.episodes)] if args.episodes else ds.episodes
    ev = evaluate(model, episodes, ds.scene, _default_eps(ds, eval_cfg), args.k, args.seed or 0)
    flag = None
    if not ev.rows:
        flag = "empty"
    elif ev.report.recall_degenerate:
        flag = "degenerate_recall"
    write_metrics_csv(out / "metrics.csv", ev.rows, ev.report, flag=flag)
    print(out / "metrics.csv")
    return EXIT_OK


def _select(episodes, spec: str) -> list:
    chosen = []
    for token in spec.split(","):
        token = token.strip()
        if not token:
            continue
        try:
            idx = int(token)
        except ValueError as exc:
            raise InputError(f"episode selector {token!r} is not an integer") from exc
        if not 0 <= idx < len(episodes):
            raise InputError(f"unknown episode {idx} (dataset has {len(episodes)})")
        chosen.append(idx)
    if not chosen:
        raise InputError("no episodes selected")
    return chosen


def cmd_predict(args) -> int:
    model, _ = _checkpoint(args)
    pcfg = load_config(args.config)["predict"] if args.config else {}
    ds = _dataset(args.data, model.cfg)
    out = _out_dir(args.out)
    K = args.k or model.cfg.K
    if K < 1:
        raise InputError("--k must be >= 1")
    seed = args.seed or 0
    n_heat = int(pcfg.get("heatmap_samples", 3000))
    chosen = _select(ds.episodes, args.episodes or "0")

    with (out / "samples.csv").open("w", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(SAMPLE_COLUMNS)
        for e in chosen:
            ep = ds.episodes[e]
            targets = ep.targets() or ep.agents
            target = targets[0]
            batch = make_batch([(ep, target.agent_id)], ds.scene, model.cfg, [e])
            pset = predict(model, batch, K, seed)[0]
            for k, s in enumerate(pset.samples):
                for t, (x, y) in enumerate(s.trajectory):
                    writer.writerow((e, k, s.generator_index, t, repr(float(x)), repr(float(y))))
            with torch.no_grad():
                priors = model.priors(model.condition(batch))[0][0].double().numpy()
            heat = predict(model, batch, n_heat, seed + 1)[0].trajectories()
            plots.overlay(out / f"overlay_{e}.png", ds.scene, target, pset)
            plots.heatmap(out / f"heatmap_{e}.png", ds.scene, target, heat)
            plots.priors_bar(out / f"priors_{e}.png", priors, model.cfg.activation_threshold)
    print(out / "samples.csv")
    return EXIT_OK


COMMANDS = {"synth": cmd_synth, "train": cmd_train, "eval": cmd_eval, "predict": cmd_predict}


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="mgtraj", description="Multi-generator trajectory forecasting")
    sub = parser.add_subparsers(dest="command", required=True)
    helps = {
        "synth": "write a synthetic intersection dataset",
        "train": "train a model on a data directory",
        "eval": "score a checkpoint on a data directory",
        "predict": "sample futures and draw figures for chosen episodes",
    }
    for name, text in helps.items():
        p = sub.add_parser(name, help=text)
        p.add_argument("--config", help="JSON file (synth: synthetic-scene fields; others: model/train/eval/predict sections)")
        p.add_argument("--out", help="output directory")
        p.add_argument("--seed", type=int, help="override the configured seed")
        if name != "synth":
            p.add_argument("--data", help="data directory")
        if name in ("eval", "predict"):
            p.add_argument("--checkpoint", help="model checkpoint file")
            p.add_argument("--k", type=int, help="samples per target (default: the model's K)")
            p.add_argument("--episodes", help="comma-separated episode indices")
    return parser


def main(argv=None) -> int:
    logging.basicConfig(level=logging.WARNING, format="%(levelname)s %(name)s: %(message)s")
    args = build_parser().parse_args(argv)
    try:
        return COMMANDS[args.command](args)
    except NonFiniteLossError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_NUMERIC
    except CheckpointError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_ARTIFACT
    except SpecError as exc:
        print(f"error: invalid spec: {exc}", file=sys.stderr)
        return EXIT_INPUT
    except (InputError, TrackFormatError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_INPUT


if __name__ == "__main__":
    sys.exit(main())
