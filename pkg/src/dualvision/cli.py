"""Command-line entry point: synth, precompute, train, generate, eval, ablate.

Every subcommand reads and writes under ``--out`` unless a path is given in
the config file.  Exit codes: 0 success, 2 configuration error, 3 data error,
4 numeric or other runtime error.
"""
from __future__ import annotations

import argparse
import json
import logging
import sys
from dataclasses import asdict, dataclass, field, fields, replace
from pathlib import Path
from typing import Optional

from .config import ModelConfig
from .data import SynthConfig, Vocabulary, generate_dataset, load_clip, load_manifest, save_clip
from .decoder import FusionMode
from .errors import ConfigError, DataError, DualVisionError, NumericError
from .experiments import ABLATION_COLUMNS, Prediction, ablation, features_in_memory, predict, write_ablation_csv
from .judge import TEMPLATES, JudgeConfig, build_judge_prompt, judge_client, judge_percent
from .metrics import evaluate_captions
from .model import DualVisionModel
from .training import TrainConfig, load_checkpoint, load_features, precompute_features, reference_config, train

log = logging.getLogger("dualvision")

EXIT_OK, EXIT_CONFIG, EXIT_DATA, EXIT_RUNTIME = 0, 2, 3, 4
COMMANDS = ("synth", "precompute", "train", "generate", "eval", "ablate")
RECIPES = ("reference", "default")


@dataclass(frozen=True)
class RunConfig:
    command: str = "synth"
    seed: int = 0
    fusion: str = "fs"
    epochs: int = 2
    recipe: str = "reference"  # "default": TrainConfig defaults, lr 3e-5, batch 8, no warmup, frozen vocabulary
    batch_size: Optional[int] = None
    lr: Optional[float] = None
    warmup_steps: Optional[int] = None
    out: str = "runs"
    manifest: Optional[str] = None
    clips: Optional[str] = None
    features: Optional[str] = None
    checkpoint: Optional[str] = None
    predictions: Optional[str] = None
    report: Optional[str] = None
    n_films: int = 12
    scenes_per_film: int = 20
    synth: dict = field(default_factory=dict)  # SynthConfig overrides
    model: dict = field(default_factory=dict)  # ModelConfig overrides
    recall_k: int = 1
    judge_url: Optional[str] = None
    judge_model: str = "judge"
    judge_template: str = "llama_chat"
    mock_judge: bool = False
    force: bool = False

    def validate(self) -> "RunConfig":
        if self.command not in COMMANDS:
            raise ConfigError(f"unknown command {self.command!r}")
        try:
            FusionMode(self.fusion)
        except ValueError:
            raise ConfigError(f"fusion must be one of {[m.value for m in FusionMode]}, got {self.fusion!r}") from None
        if self.recipe not in RECIPES:
            raise ConfigError(f"recipe must be one of {RECIPES}")
        if self.judge_template not in TEMPLATES:
            raise ConfigError(f"judge_template must be one of {sorted(TEMPLATES)}")
        if self.epochs < 1 or self.recall_k < 1:
            raise ConfigError("epochs and recall_k must be positive")
        self.synth_config().validate()
        self.train_config()
        return self

    # derived settings
    def synth_config(self) -> SynthConfig:
        try:
            return SynthConfig(**self.synth)
        except TypeError as exc:
            raise ConfigError(f"bad synth settings: {exc}") from None

    def model_config(self) -> ModelConfig:
        return ModelConfig.from_dict({**self.model, "fusion": self.fusion})

    def train_config(self) -> TrainConfig:
        model = self.model_config()
        if self.recipe == "reference":
            base = reference_config(self.seed, self.fusion)
        else:
            base = TrainConfig(seed=self.seed)
        overrides = {k: v for k, v in (("batch_size", self.batch_size), ("lr", self.lr), ("warmup_steps", self.warmup_steps)) if v is not None}
        if self.warmup_steps is not None:
            overrides["warmup_fraction"] = 0.0
        return replace(base, epochs=self.epochs, model=model, **overrides)

    # paths
    @property
    def out_dir(self) -> Path:
        return Path(self.out)

    @property
    def manifest_path(self) -> Path:
        return Path(self.manifest) if self.manifest else self.out_dir / "data" / "manifest.jsonl"

    @property
    def clip_store(self) -> Path:
        return Path(self.clips) if self.clips else self.out_dir / "data" / "clips"

    @property
    def feature_cache(self) -> Path:
        return Path(self.features) if self.features else self.out_dir / "features"

    @property
    def run_dir(self) -> Path:
        return self.out_dir / "run"

    @property
    def checkpoint_path(self) -> Path:
        return Path(self.checkpoint) if self.checkpoint else self.run_dir / "final.ckpt"

    @property
    def predictions_path(self) -> Path:
        return Path(self.predictions) if self.predictions else self.run_dir / "predictions.jsonl"

    @property
    def report_dir(self) -> Path:
        return Path(self.report) if self.report else self.out_dir / "report"

    def freeze(self, path: Path) -> None:
        path.parent.mkdir(parents=True, exist_ok=True)
        path.write_text(json.dumps(asdict(self), indent=2, sort_keys=True) + "\n")


def load_config_file(path) -> dict:
    try:
        data = json.loads(Path(path).read_text())
    except FileNotFoundError:
        raise ConfigError(f"config file {path} not found") from None
    except json.JSONDecodeError as exc:
        raise ConfigError(f"config file {path}: invalid JSON ({exc.msg} at line {exc.lineno})") from None
    if not isinstance(data, dict):
        raise ConfigError(f"config file {path} must hold a JSON object")
    known = {f.name for f in fields(RunConfig)} - {"command"}
    unknown = sorted(set(data) - known)
    if unknown:
        raise ConfigError(f"unknown config keys: {unknown}")
    return data


def resolve_config(args: argparse.Namespace) -> RunConfig:
    """Config file first, then flags; flags win."""
    values = load_config_file(args.config) if args.config else {}
    for key in ("seed", "fusion", "epochs", "out", "judge_url"):
        value = getattr(args, key)
        if value is not None:
            values[key] = value
    if args.mock_judge:
        values["mock_judge"] = True
    if args.force:
        values["force"] = True
    try:
        cfg = RunConfig(command=args.command, **values)
    except TypeError as exc:
        raise ConfigError(str(exc)) from None
    return cfg.validate()


# -- subcommands -----------------------------------------------------------------
def cmd_synth(cfg: RunConfig) -> dict:
    manifest, clips = generate_dataset(cfg.seed, cfg.n_films, cfg.scenes_per_film, cfg.synth_config())
    manifest.save(cfg.manifest_path)
    for rec in manifest:
        save_clip(cfg.clip_store, clips[rec.clip_id])
    return {"clips": len(manifest), "train": len(manifest.split("train")), "eval": len(manifest.split("eval")), "manifest": str(cfg.manifest_path)}


def _frozen_model(cfg: RunConfig) -> DualVisionModel:
    return DualVisionModel(cfg.model_config(), seed=cfg.seed)


def cmd_precompute(cfg: RunConfig) -> dict:
    manifest = load_manifest(cfg.manifest_path)
    stats = precompute_features(_frozen_model(cfg), manifest, cfg.clip_store, cfg.feature_cache, force=cfg.force)
    for cid, err in stats["failed"].items():
        print(f"failed: {cid}: {err}", file=sys.stderr)
    if stats["failed"] and not stats["computed"] and not stats["skipped"]:
        raise DataError("no clip could be processed")
    return {k: len(v) if k != "fingerprint" else v for k, v in stats.items()}


def _cached_features(cfg: RunConfig, manifest, model: DualVisionModel):
    return load_features(cfg.feature_cache, [r.clip_id for r in manifest], model.feature_fingerprint())


def cmd_train(cfg: RunConfig) -> dict:
    manifest = load_manifest(cfg.manifest_path)
    tcfg = cfg.train_config()
    model = DualVisionModel(tcfg.model, seed=tcfg.seed)
    features = _cached_features(cfg, manifest, model)
    cfg.run_dir.mkdir(parents=True, exist_ok=True)
    (cfg.run_dir / "train_config.json").write_text(json.dumps(tcfg.to_dict(), indent=2, sort_keys=True) + "\n")
    result = train(manifest, tcfg, features=features, out_dir=cfg.run_dir, model=model)
    return {
        "steps": result.step,
        "first_loss": result.losses[0],
        "final_loss": result.losses[-1],
        "checkpoint": str(result.final_path),
        "best": str(result.best_path) if result.best_path else None,
    }


def cmd_generate(cfg: RunConfig) -> dict:
    manifest = load_manifest(cfg.manifest_path)
    ckpt = load_checkpoint(cfg.checkpoint_path)
    recs = manifest.split("eval")
    features = _cached_features(cfg, recs, ckpt.model)
    preds = predict(ckpt.model, recs, features, Vocabulary(ckpt.model.cfg.vocab_size))
    path = cfg.predictions_path
    path.parent.mkdir(parents=True, exist_ok=True)
    with path.open("w") as fh:
        for p in preds:
            fh.write(json.dumps(p.to_dict(), sort_keys=True) + "\n")
    return {"predictions": len(preds), "path": str(path)}


def load_predictions(path, expected_ids: list[str]) -> list[Prediction]:
    path = Path(path)
    if not path.exists():
        raise DataError(f"{path}: predictions not found")
    preds: dict[str, Prediction] = {}
    for lineno, line in enumerate(path.read_text().splitlines(), start=1):
        if not line.strip():
            continue
        try:
            obj = json.loads(line)
            pred = Prediction(obj["clip_id"], list(obj["tokens"]), obj["text"])
        except (json.JSONDecodeError, KeyError, TypeError) as exc:
            raise DataError(f"{path}:{lineno}: bad prediction record ({exc})") from None
        if pred.clip_id in preds:
            raise DataError(f"{path}:{lineno}: duplicate prediction for {pred.clip_id}")
        preds[pred.clip_id] = pred
    missing = [cid for cid in expected_ids if cid not in preds]
    extra = sorted(set(preds) - set(expected_ids))
    if missing or extra:
        raise DataError(f"{path}: predictions missing {missing[:5]}{'...' if len(missing) > 5 else ''}, unexpected {extra[:5]}")
    return [preds[cid] for cid in expected_ids]


def cmd_eval(cfg: RunConfig) -> dict:
    manifest = load_manifest(cfg.manifest_path)
    recs = manifest.split("eval")
    preds = load_predictions(cfg.predictions_path, [r.clip_id for r in recs])
    report = evaluate_captions(
        [r.clip_id for r in recs], [p.text for p in preds], [r.caption_text for r in recs], [r.film_id for r in recs], cfg.recall_k
    )
    if cfg.mock_judge or cfg.judge_url:
        prompts = [build_judge_prompt(cfg.judge_template, r.caption_text, p.text or "(empty)") for r, p in zip(recs, preds)]
        jcfg = JudgeConfig(url=cfg.judge_url, model=cfg.judge_model, mock=cfg.mock_judge)
        scores = judge_client(prompts, jcfg)
        report.judge_percent = judge_percent(scores)
        report.judge_valid = sum(s.valid for s in scores)
        for row, s in zip(report.rows, scores):
            row["judge_score"] = s.score if s.valid else ""
            row["judge_error"] = s.error
    report.write(cfg.report_dir)
    return report.summary()


def cmd_ablate(cfg: RunConfig) -> dict:
    if cfg.manifest_path.exists():
        manifest = load_manifest(cfg.manifest_path)
        clips = {r.clip_id: load_clip(cfg.clip_store, r.clip_id) for r in manifest}
    else:
        manifest, clips = generate_dataset(cfg.seed, cfg.n_films, cfg.scenes_per_film, cfg.synth_config())
    base = cfg.train_config()
    features = features_in_memory(manifest, clips, base.model, cfg.seed)
    rows = ablation(manifest, features, cfg.seed, base=base)
    path = cfg.out_dir / "ablation.csv"
    write_ablation_csv(path, rows)
    return {"path": str(path), "rows": [{c: r[c] for c in ABLATION_COLUMNS} for r in rows]}


HANDLERS = {
    "synth": cmd_synth,
    "precompute": cmd_precompute,
    "train": cmd_train,
    "generate": cmd_generate,
    "eval": cmd_eval,
    "ablate": cmd_ablate,
}


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="dualvision", description=__doc__.splitlines()[0])
    parser.add_argument("command", choices=COMMANDS)
    parser.add_argument("--config", help="JSON file with run settings (flags override it)")
    parser.add_argument("--seed", type=int)
    parser.add_argument("--fusion", choices=[m.value for m in FusionMode])
    parser.add_argument("--epochs", type=int)
    parser.add_argument("--out", help="run directory (default: runs)")
    parser.add_argument("--judge-url", dest="judge_url")
    parser.add_argument("--mock-judge", action="store_true", help="score with the offline token-overlap judge")
    parser.add_argument("--force", action="store_true", help="recompute cached features")
    parser.add_argument("-v", "--verbose", action="store_true")
    return parser


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING, format="%(levelname)s %(name)s: %(message)s")
    try:
        cfg = resolve_config(args)
        cfg.freeze(cfg.out_dir / f"config.{cfg.command}.json")
        result = HANDLERS[cfg.command](cfg)
    except ConfigError as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    except DataError as exc:
        print(f"data error: {exc}", file=sys.stderr)
        return EXIT_DATA
    except (NumericError, DualVisionError, ArithmeticError) as exc:
        print(f"runtime error: {exc}", file=sys.stderr)
        return EXIT_RUNTIME
    print(json.dumps(result, indent=2, sort_keys=True, default=str))
    return EXIT_OK


if __name__ == "__main__":
    sys.exit(main())
