"""``eflab`` command-line entry point.

Every command takes one JSON config, writes its artifacts into ``--out`` and
leaves a manifest (config hash, seed, code version) next to them.
"""

from __future__ import annotations

import argparse
import csv
import hashlib
import json
import logging
import sys
from concurrent.futures import ProcessPoolExecutor
from dataclasses import asdict, fields
from pathlib import Path

import numpy as np

from eflab import __version__, laws, synthdata
from eflab.corruption import MODES as CORRUPTION_MODES
from eflab.corruption import corrupt
from eflab.errors import ConfigError, DataError, EflabError
from eflab.metrics import MetricReport, class_centroids, empirical, sequence_key, tv_distance
from eflab.model import ModelDims, TrainConfig, ToyModel, load_checkpoint, save_checkpoint, train
from eflab.oracle import OracleModel, OracleTable, loss_floor
from eflab.sampler import SamplerConfig, generate
from eflab.schedule import Schedule
from eflab.sequence import MixedSequence, Vocabulary, from_record, read_dataset, read_weighted_dataset, to_record, write_dataset

log = logging.getLogger("eflab")

CONFIG_VERSION = 1
COMMON_KEYS = {"version", "seed", "out"}
COMMAND_KEYS = {
    "gen": {"spec", "count"},
    "corrupt": {"dataset", "schedule", "mode", "draws_per_record", "vocab_size"},
    "oracle": {"dataset", "schedule", "vocab_size", "states", "times"},
    "train": {"dataset", "schedule", "vocab_size", "model", "train"},
    "sample": {"dataset", "schedule", "vocab_size", "model", "uncond_model", "sampler", "prompts", "runs"},
    "validate-schedule": {"schedule", "draws", "ratio_multiplier"},
    "report": {"samples", "dataset", "tolerance"},
}
SAMPLER_KEYS = {f.name for f in fields(SamplerConfig)} - {"schedule", "seed"}
DIMS_KEYS = {f.name for f in fields(ModelDims)} - {"vocab_size"}
TRAIN_KEYS = {f.name for f in fields(TrainConfig)} - {"seed"}


# -- config handling ---------------------------------------------------------------


def load_config(path: str | None, command: str) -> dict:
    if path is None:
        cfg: dict = {}
    else:
        try:
            cfg = json.loads(Path(path).read_text())
        except OSError as exc:
            raise ConfigError(f"cannot read config {path}: {exc}") from exc
        except json.JSONDecodeError as exc:
            raise ConfigError(f"config {path} is not valid JSON: {exc}") from exc
    if not isinstance(cfg, dict):
        raise ConfigError("config must be a JSON object")
    unknown = set(cfg) - COMMON_KEYS - COMMAND_KEYS[command]
    if unknown:
        raise ConfigError(f"unknown config keys for {command}: {sorted(unknown)}")
    if cfg.get("version", CONFIG_VERSION) != CONFIG_VERSION:
        raise ConfigError(f"unsupported config version {cfg['version']}")
    base = Path(path).parent if path else Path.cwd()
    # resolve every path before doing any work
    for key in ("dataset", "samples"):
        if key in cfg:
            cfg[key] = str((base / cfg[key]).resolve())
    if isinstance(cfg.get("spec"), str):
        cfg["spec"] = str((base / cfg["spec"]).resolve())
    for key in ("model", "uncond_model"):
        if isinstance(cfg.get(key), str) and cfg[key] != "oracle":
            cfg[key] = str((base / cfg[key]).resolve())
    return cfg


def _section(cfg: dict, key: str, allowed: set[str]) -> dict:
    sec = cfg.get(key, {})
    if not isinstance(sec, dict):
        raise ConfigError(f"'{key}' must be an object")
    unknown = set(sec) - allowed
    if unknown:
        raise ConfigError(f"unknown keys in '{key}': {sorted(unknown)}")
    return dict(sec)


def _schedule(cfg: dict) -> Schedule:
    return Schedule.from_config(cfg.get("schedule", {"kind": "linear"}))


def _need(cfg: dict, key: str):
    if key not in cfg:
        raise ConfigError(f"config is missing '{key}'")
    return cfg[key]


def _dataset(cfg: dict) -> list[tuple[MixedSequence, float]]:
    path = _need(cfg, "dataset")
    try:
        return read_weighted_dataset(path)
    except OSError as exc:
        raise DataError(f"cannot read dataset {path}: {exc}") from exc
    except json.JSONDecodeError as exc:
        raise DataError(f"unparseable dataset {path}: {exc}") from exc


def _vocab(cfg: dict, data) -> Vocabulary:
    if "vocab_size" in cfg:
        return Vocabulary(int(cfg["vocab_size"]))
    toks = [el for seq, _ in data for el in seq if isinstance(el, int)]
    return Vocabulary(max(toks) + 1 if toks else 1)


def _write_manifest(out: Path, command: str, cfg: dict, seed: int, outputs: list[str]) -> None:
    blob = json.dumps(cfg, sort_keys=True).encode()
    manifest = {
        "command": command,
        "config": cfg,
        "config_sha256": hashlib.sha256(blob).hexdigest(),
        "seed": seed,
        "code_version": __version__,
        "outputs": outputs,
    }
    (out / f"manifest.{command}.json").write_text(json.dumps(manifest, indent=2, sort_keys=True))


# -- commands ----------------------------------------------------------------------


def cmd_gen(cfg: dict, seed: int, out: Path, args) -> list[str]:
    spec_obj = _need(cfg, "spec")
    spec = synthdata.GeneratorSpec.load(spec_obj) if isinstance(spec_obj, str) else synthdata.GeneratorSpec.from_json(spec_obj)
    count = int(cfg.get("count", 1000))
    data = synthdata.generate(spec, count, np.random.default_rng(seed))
    write_dataset(out / "dataset.jsonl", data)
    (out / "stats.json").write_text(json.dumps(synthdata.stats(data, spec.vocab_size, spec.max_len), indent=2))
    return ["dataset.jsonl", "stats.json"]


def cmd_corrupt(cfg: dict, seed: int, out: Path, args) -> list[str]:
    data = _dataset(cfg)
    vocab = _vocab(cfg, data)
    mode = cfg.get("mode", "interleaved")
    if mode not in CORRUPTION_MODES:
        raise ConfigError(f"unknown corruption mode {mode!r}")
    s = _schedule(cfg)
    draws = int(cfg.get("draws_per_record", 1))
    rng = np.random.default_rng(seed)
    with open(out / "corruptions.jsonl", "w") as fh:
        for i, (seq, _) in enumerate(data):
            for _ in range(draws):
                rec = corrupt(seq, s, mode, rng, image_token_id=vocab.image_token_id)
                fh.write(json.dumps({"record": i, **rec.to_json()}) + "\n")
    return ["corruptions.jsonl"]


def cmd_oracle(cfg: dict, seed: int, out: Path, args) -> list[str]:
    data = _dataset(cfg)
    vocab = _vocab(cfg, data)
    table = OracleTable(data, vocab, _schedule(cfg))
    times = [float(t) for t in cfg.get("times", [0.1, 0.3, 0.5, 0.7, 0.9])]
    states = [from_record(r) for r in cfg.get("states", [{"prompt": [], "target": []}])]
    with open(out / "oracle.jsonl", "w") as fh:
        for st in states:
            for t in times:
                row = {"state": to_record(st), "t": t}
                row["posterior"] = {str(k): v for k, v in table.posterior(st, t).items()}
                row["heads"] = table.heads(st, t).to_json()
                fh.write(json.dumps(row) + "\n")
    with open(out / "loss_floor.csv", "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["t", "loss_floor"])
        for t in times:
            w.writerow([t, loss_floor(table, t)])
    return ["oracle.jsonl", "loss_floor.csv"]


def cmd_train(cfg: dict, seed: int, out: Path, args) -> list[str]:
    data = _dataset(cfg)
    vocab = _vocab(cfg, data)
    dims_kw = _section(cfg, "model", DIMS_KEYS)
    train_kw = _section(cfg, "train", TRAIN_KEYS)
    if "max_len" not in dims_kw:
        dims_kw["max_len"] = max(len(seq) for seq, _ in data)
    dims = ModelDims(vocab_size=vocab.size, **dims_kw)
    tcfg = TrainConfig(seed=seed, **train_kw)
    s = _schedule(cfg)
    res = train(data, tcfg, s, dims)
    save_checkpoint(out / "model.ckpt", res.params, vocab, s)
    with open(out / "history.csv", "w", newline="") as fh:
        w = csv.DictWriter(fh, fieldnames=list(res.history[0]) if res.history else ["step"])
        w.writeheader()
        w.writerows(res.history)
    return ["model.ckpt", "model.ckpt.json", "history.csv"]


def _load_model(spec, data, vocab: Vocabulary, s: Schedule, prompt_free: bool = False):
    if spec == "oracle":
        if data is None:
            raise ConfigError("the oracle model needs a dataset")
        table = OracleTable(data, vocab, s)
        return OracleModel(table.without_prompts() if prompt_free else table, freeze_off_support=True)
    try:
        params, _ = load_checkpoint(spec)
    except OSError as exc:
        raise DataError(f"cannot read checkpoint {spec}: {exc}") from exc
    return ToyModel(params)


def _sample_one(job):
    prompt, model, uncond, scfg, vocab, rng = job
    return generate(prompt, model, scfg, vocab, rng, uncond)


def cmd_sample(cfg: dict, seed: int, out: Path, args) -> list[str]:
    for flag, key in (("dataset", "dataset"), ("model", "model")):
        val = getattr(args, flag, None)
        if val is not None:
            cfg[key] = val if val == "oracle" else str(Path(val).resolve())
    data = _dataset(cfg) if "dataset" in cfg else None
    vocab = _vocab(cfg, data or [])
    s = _schedule(cfg)
    skw = _section(cfg, "sampler", SAMPLER_KEYS)
    for flag, key in (("dt", "dt"), ("cfg_w", "guidance_w"), ("mode", "mode"), ("steps_img", "image_substeps")):
        val = getattr(args, flag, None)
        if val is not None:
            skw[key] = val
    cfg["sampler"] = skw  # the manifest records the effective settings
    scfg = SamplerConfig(schedule=s, seed=seed, **skw)
    model_spec = cfg.get("model", "oracle")
    model = _load_model(model_spec, data, vocab, s)
    uncond = None
    if scfg.guidance_w is not None:
        uncond = _load_model(cfg.get("uncond_model", model_spec), data, vocab, s, prompt_free=True)
    runs = int(args.runs if args.runs is not None else cfg.get("runs", 1))
    cfg["runs"] = runs
    prompts = [MixedSequence(tuple(p), len(p), scfg.max_len) for p in cfg.get("prompts", [[]])]
    rngs = np.random.default_rng(seed).spawn(runs * len(prompts))
    jobs = [(prompts[i % len(prompts)], model, uncond, scfg, vocab, rngs[i]) for i in range(len(rngs))]
    if args.threads > 1:
        with ProcessPoolExecutor(max_workers=args.threads) as pool:
            results = list(pool.map(_sample_one, jobs, chunksize=max(1, len(jobs) // (4 * args.threads))))
    else:
        results = [_sample_one(j) for j in jobs]
    write_dataset(out / "samples.jsonl", [seq for seq, _ in results])
    outputs = ["samples.jsonl"]
    clamps = sum(tr.clamp_count for _, tr in results)
    if clamps:
        log.warning("insertion probability clamped %d times; consider a smaller dt", clamps)
    trace_out = args.trace_out
    if trace_out:
        with open(out / trace_out, "w") as fh:
            for _, tr in results:
                fh.write(json.dumps(tr.to_json(vocab.image_token_id)) + "\n")
        outputs.append(trace_out)
    return outputs


def cmd_validate_schedule(cfg: dict, seed: int, out: Path, args) -> list[str]:
    s = _schedule(cfg)
    draws = int(cfg.get("draws", 100_000))
    reports = laws.validate_schedule(s, draws, seed, float(cfg.get("ratio_multiplier", 1.0)))
    _write_reports(out / "schedule_reports.jsonl", reports)
    return ["schedule_reports.jsonl"]


def tv_report(samples: list[MixedSequence], data: list[tuple[MixedSequence, float]], tolerance: float = 0.05, seed=None) -> MetricReport:
    """TV over exact sequence identity, images labelled by the nearest data class centroid."""
    centroids = class_centroids(seq for seq, _ in data)
    gen = empirical(sequence_key(x, centroids) for x in samples)
    ref: dict = {}
    for seq, w in data:
        k = sequence_key(seq, centroids)
        ref[k] = ref.get(k, 0.0) + w
    return MetricReport.at_most("tv_distance", tv_distance(gen, ref), tolerance, len(samples), seed)


def cmd_report(cfg: dict, seed: int, out: Path, args) -> list[str]:
    path = _need(cfg, "samples")
    try:
        samples = read_dataset(path)
    except OSError as exc:
        raise DataError(f"cannot read samples {path}: {exc}") from exc
    rep = tv_report(samples, _dataset(cfg), float(cfg.get("tolerance", 0.05)), seed)
    _write_reports(out / "tv_report.jsonl", [rep])
    return ["tv_report.jsonl"]


def _write_reports(path: Path, reports: list[MetricReport]) -> None:
    with open(path, "w") as fh:
        for rep in reports:
            fh.write(json.dumps(rep.to_json()) + "\n")
            print(rep.line())


COMMANDS = {
    "gen": cmd_gen,
    "corrupt": cmd_corrupt,
    "oracle": cmd_oracle,
    "train": cmd_train,
    "sample": cmd_sample,
    "validate-schedule": cmd_validate_schedule,
    "report": cmd_report,
}


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="eflab", description="Insertion-based text/image generation toolkit.")
    parser.add_argument("--version", action="version", version=f"%(prog)s {__version__}")
    sub = parser.add_subparsers(dest="command", required=True)
    for name in COMMANDS:
        p = sub.add_parser(name)
        p.add_argument("--config", help="JSON config file")
        p.add_argument("--seed", type=int, help="overrides the config seed")
        p.add_argument("--threads", type=int, default=1)
        p.add_argument("--out", help="output directory (default: config 'out' or '.')")
        p.add_argument("-v", "--verbose", action="store_true")
        if name == "sample":
            p.add_argument("--dt", type=float)
            p.add_argument("--steps-img", type=int, dest="steps_img")
            p.add_argument("--cfg-w", type=float, dest="cfg_w")
            p.add_argument("--mode", choices=["interleaved", "independent", "text_only"])
            p.add_argument("--runs", type=int)
            p.add_argument("--trace-out", dest="trace_out")
            p.add_argument("--dataset")
            p.add_argument("--model", help="'oracle' or a checkpoint path")
    return parser


def main(argv: list[str] | None = None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING, format="%(levelname)s %(message)s")
    try:
        if args.threads < 1:
            raise ConfigError("--threads must be at least 1")
        cfg = load_config(args.config, args.command)
        seed = args.seed if args.seed is not None else int(cfg.get("seed", 0))
        out = Path(args.out or cfg.get("out", "."))
        out.mkdir(parents=True, exist_ok=True)
        outputs = COMMANDS[args.command](cfg, seed, out, args)
        _write_manifest(out, args.command, cfg, seed, outputs)
    except EflabError as exc:
        print(f"eflab {args.command}: {type(exc).__name__}: {exc}", file=sys.stderr)
        return exc.exit_code
    return 0


if __name__ == "__main__":
    sys.exit(main())
