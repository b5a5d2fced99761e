"""Batch command-line harness.

    pedcov synth  --out data/ --scenes 5            # synthetic scene files
    pedcov ingest --config run.json                 # window cache + summary
    pedcov train  --config run.json --target goal   # then --target cov
    pedcov eval   --config run.json --predictor covnet|fp
    pedcov report --config run.json                 # table across evaluated predictors

Every flag overrides the matching key of the JSON config file.
"""

from __future__ import annotations

import argparse
import json
import logging
import shutil
import sys
import tempfile
from collections import Counter
from dataclasses import asdict, dataclass, field, fields
from pathlib import Path
from typing import Callable, Sequence

import numpy as np

from . import neural as nn
from .covnet import CovNetConfig, CovNetModel, PredictedDistribution
from .dataset import (
    DT,
    T_OBS,
    AnnotationError,
    NeighborTrack,
    TrackletWindow,
    build_windows,
    leave_one_out,
    load_scene_dir,
)
from .goalnet import GoalConfig, GoalModel, GoalTrainConfig, train_goal
from .metrics import CalibrationReport, EvalRecord, build_report, write_curves
from .pipeline import compute_goals, compute_sfm_means, predict_covnet, predict_fp
from .sfm import SfmParams
from .train import LOG_COLUMNS, SyntheticSpec, TrainConfig, train_on_means, write_log_csv, write_synthetic_scene

log = logging.getLogger("pedcov")

SCHEMA_VERSION = 1
CACHE_KIND = "window-cache"
CACHE_VERSION = 1
PREDICTORS = ("covnet", "fp")


class CliError(RuntimeError):
    pass


@dataclass
class RunConfig:
    data_dir: str = "data"
    output_dir: str = "runs/default"
    scenes: list[str] | None = None
    test_scene: str | None = None
    split_index: int = 0
    predictor: str = "covnet"
    goal_source: str = "predicted"
    eval_mode: str = "prior-mean"
    seed: int = 0
    frame_stride: int = 10
    dt: float = DT
    sfm: dict = field(default_factory=dict)
    train: dict = field(default_factory=dict)
    goal_train: dict = field(default_factory=dict)
    covnet: dict = field(default_factory=dict)
    goal_model: dict = field(default_factory=dict)
    schema_version: int = SCHEMA_VERSION

    def validate(self, need_data: bool = True) -> None:
        if self.schema_version != SCHEMA_VERSION:
            raise CliError(f"unsupported config schema_version {self.schema_version} (expected {SCHEMA_VERSION})")
        if self.predictor not in PREDICTORS:
            raise CliError(f"predictor must be one of {PREDICTORS}, got {self.predictor!r}")
        if self.goal_source not in ("predicted", "ground-truth-endpoint"):
            raise CliError(f"goal_source must be 'predicted' or 'ground-truth-endpoint', got {self.goal_source!r}")
        if self.eval_mode not in ("prior-mean", "prior-sample"):
            raise CliError(f"eval_mode must be 'prior-mean' or 'prior-sample', got {self.eval_mode!r}")
        if need_data and not Path(self.data_dir).is_dir():
            raise CliError(f"data directory not found: {self.data_dir}")

    @property
    def out(self) -> Path:
        return Path(self.output_dir)

    def sfm_params(self) -> SfmParams:
        return SfmParams(**{"dt": self.dt, **self.sfm})

    def train_config(self) -> TrainConfig:
        return TrainConfig(**{"seed": self.seed, **self.train})

    def goal_train_config(self) -> GoalTrainConfig:
        return GoalTrainConfig(**{"seed": self.seed, **self.goal_train})

    @classmethod
    def from_dict(cls, d: dict) -> "RunConfig":
        known = {f.name for f in fields(cls)}
        unknown = set(d) - known
        if unknown:
            raise CliError(f"unknown config keys: {sorted(unknown)}")
        return cls(**d)


def load_config(path: str | None, overrides: dict) -> RunConfig:
    data = {}
    if path:
        try:
            data = json.loads(Path(path).read_text())
        except (OSError, json.JSONDecodeError) as exc:
            raise CliError(f"cannot read config {path}: {exc}") from exc
    for key, value in overrides.items():
        if value is None:
            continue
        if "." in key:
            head, tail = key.split(".", 1)
            data.setdefault(head, {})[tail] = value
        else:
            data[key] = value
    return RunConfig.from_dict(data)


# ---------------------------------------------------------------------------
# Window cache
# ---------------------------------------------------------------------------

def _pack_windows(windows: Sequence[TrackletWindow]) -> dict[str, np.ndarray]:
    n = len(windows)
    M = max([len(w.neighbors) for w in windows] + [0])
    nb_pos = np.zeros((n, M, T_OBS, 2))
    nb_mask = np.zeros((n, M, T_OBS), dtype=bool)
    nb_ids = np.full((n, M), -1, dtype=np.int64)
    for i, w in enumerate(windows):
        for j, nb in enumerate(w.neighbors):
            nb_pos[i, j], nb_mask[i, j], nb_ids[i, j] = nb.pos, nb.mask, nb.ped_id
    return {
        "agent_id": np.array([w.agent_id for w in windows], dtype=np.int64),
        "start_frame": np.array([w.start_frame for w in windows], dtype=np.int64),
        "obs": np.stack([w.obs for w in windows]) if n else np.zeros((0, T_OBS, 2)),
        "fut": np.stack([w.fut for w in windows]) if n else np.zeros((0, 12, 2)),
        "nb_pos": nb_pos,
        "nb_mask": nb_mask,
        "nb_ids": nb_ids,
    }


def _unpack_windows(a: dict[str, np.ndarray], scene: str, dt: float) -> list[TrackletWindow]:
    out = []
    for i in range(len(a["agent_id"])):
        nbrs = [
            NeighborTrack(int(a["nb_ids"][i, j]), a["nb_pos"][i, j].copy(), a["nb_mask"][i, j].copy())
            for j in range(a["nb_ids"].shape[1])
            if a["nb_ids"][i, j] >= 0
        ]
        out.append(TrackletWindow(int(a["agent_id"][i]), a["obs"][i], a["fut"][i], nbrs, dt, scene,
                                  int(a["start_frame"][i])))
    return out


def cache_path(cfg: RunConfig) -> Path:
    return cfg.out / "windows.cache"


def write_cache(path: Path, scenes: dict[str, list[TrackletWindow]], cfg: RunConfig) -> None:
    arrays = {}
    for scene, windows in scenes.items():
        for key, value in _pack_windows(windows).items():
            arrays[f"{scene}/{key}"] = value
    meta = {"kind": CACHE_KIND, "cache_version": CACHE_VERSION, "scenes": sorted(scenes),
            "dt": cfg.dt, "frame_stride": cfg.frame_stride}
    nn.save_arrays(path, arrays, meta)


def read_cache(path: Path) -> dict[str, list[TrackletWindow]]:
    arrays, meta = nn.load_arrays(path)
    if meta.get("kind") != CACHE_KIND or meta.get("cache_version") != CACHE_VERSION:
        raise CliError(f"{path} is not a version-{CACHE_VERSION} window cache")
    out = {}
    for scene in meta["scenes"]:
        part = {k.split("/", 1)[1]: v for k, v in arrays.items() if k.startswith(scene + "/")}
        out[scene] = _unpack_windows(part, scene, meta["dt"])
    return out


def cmd_ingest(cfg: RunConfig) -> dict[str, list[TrackletWindow]]:
    cfg.validate()
    try:
        annotations = load_scene_dir(cfg.data_dir, cfg.scenes)
    except FileNotFoundError as exc:
        raise CliError(str(exc)) from exc
    except AnnotationError as exc:
        raise CliError(f"parse failure: {exc}") from exc
    if not annotations:
        raise CliError(f"no scene files in {cfg.data_dir}")
    scenes = {
        name: build_windows(rows, cfg.dt, cfg.frame_stride, scene=name) for name, rows in annotations.items()
    }
    cfg.out.mkdir(parents=True, exist_ok=True)
    write_cache(cache_path(cfg), scenes, cfg)
    lines = ["scene\twindows\tneighbor_histogram"]
    for name, windows in scenes.items():
        hist = Counter(len(w.neighbors) for w in windows)
        hist_s = " ".join(f"{k}:{hist[k]}" for k in sorted(hist))
        lines.append(f"{name}\t{len(windows)}\t{hist_s}")
    (cfg.out / "ingest_summary.txt").write_text("\n".join(lines) + "\n")
    log.info("cached %d windows from %d scenes", sum(map(len, scenes.values())), len(scenes))
    return scenes


def _load_scenes(cfg: RunConfig) -> dict[str, list[TrackletWindow]]:
    path = cache_path(cfg)
    if not path.exists():
        log.info("no window cache at %s; ingesting", path)
        return cmd_ingest(cfg)
    scenes = read_cache(path)
    if cfg.scenes is not None:
        missing = [s for s in cfg.scenes if s not in scenes]
        if missing:
            raise CliError(f"scenes {missing} not in cache {path}; rerun ingest")
        scenes = {s: scenes[s] for s in cfg.scenes}
    return scenes


def _split(cfg: RunConfig, scenes: dict[str, list[TrackletWindow]]):
    names = sorted(scenes)
    if len(names) < 2:
        raise CliError("need at least two scenes for a leave-one-out split")
    plans = leave_one_out(names)
    if cfg.test_scene is not None:
        matching = [p for p in plans if p.test_scene == cfg.test_scene]
        if not matching:
            raise CliError(f"test scene {cfg.test_scene!r} not among {names}")
        plan = matching[0]
    else:
        if not 0 <= cfg.split_index < len(plans):
            raise CliError(f"split_index {cfg.split_index} out of range for {len(plans)} scenes")
        plan = plans[cfg.split_index]
    train = [w for s in plan.train_scenes for w in scenes[s]]
    return plan, train, scenes[plan.test_scene]


# ---------------------------------------------------------------------------
# Training / evaluation
# ---------------------------------------------------------------------------

def _goal_ckpt(cfg: RunConfig) -> Path:
    return cfg.out / "goal.ckpt"


def _cov_ckpt(cfg: RunConfig) -> Path:
    return cfg.out / "covnet.ckpt"


def _write_sidecar(path: Path, payload: dict) -> None:
    path.write_text(json.dumps(payload, indent=2, sort_keys=True) + "\n")


def cmd_train(cfg: RunConfig, target: str) -> Path:
    cfg.validate()
    scenes = _load_scenes(cfg)
    plan, train_windows, _ = _split(cfg, scenes)
    if not train_windows:
        raise CliError("training split contains no windows")
    cfg.out.mkdir(parents=True, exist_ok=True)
    if target == "goal":
        gcfg = cfg.goal_train_config()
        result = train_goal(train_windows, gcfg, GoalConfig(**cfg.goal_model))
        result.model.save(_goal_ckpt(cfg), {"test_scene": plan.test_scene})
        _write_sidecar(cfg.out / "goal.json", {"model": asdict(result.model.cfg), "train": asdict(gcfg),
                                               "test_scene": plan.test_scene, "best_epoch": result.best_epoch})
        write_log_csv(cfg.out / "goal_train_log.csv", result.log, ("epoch", "split", "mse"))
        return _goal_ckpt(cfg)
    if target == "cov":
        goal_model = None
        if cfg.goal_source == "predicted":
            if not _goal_ckpt(cfg).exists():
                raise CliError(f"no goal checkpoint at {_goal_ckpt(cfg)}; run `pedcov train --target goal` first")
            goal_model = GoalModel.load(_goal_ckpt(cfg))
        tcfg = cfg.train_config()
        params = cfg.sfm_params()
        goals = compute_goals(train_windows, goal_model, cfg.goal_source)
        means = compute_sfm_means(train_windows, goals, params, goal_model)
        mcfg = CovNetConfig(**cfg.covnet)
        result = train_on_means(train_windows, means, tcfg, mcfg)
        result.model.save(_cov_ckpt(cfg), {"test_scene": plan.test_scene})
        _write_sidecar(cfg.out / "covnet.json", {"model": asdict(mcfg), "train": asdict(tcfg), "sfm": asdict(params),
                                                 "goal_source": cfg.goal_source, "test_scene": plan.test_scene,
                                                 "best_epoch": result.best_epoch})
        write_log_csv(cfg.out / "covnet_train_log.csv", result.log, LOG_COLUMNS)
        return _cov_ckpt(cfg)
    raise CliError(f"unknown train target {target!r}")


PredictorFn = Callable[[Sequence[TrackletWindow]], list[PredictedDistribution]]


def _make_predictor(cfg: RunConfig) -> PredictorFn:
    params = cfg.sfm_params()
    goal_model = GoalModel.load(_goal_ckpt(cfg)) if _goal_ckpt(cfg).exists() else None
    goal_source = cfg.goal_source
    if cfg.predictor == "covnet":
        if not _cov_ckpt(cfg).exists():
            raise CliError(f"no CovarianceNet checkpoint at {_cov_ckpt(cfg)}; run `pedcov train --target cov` first")
        if goal_source == "predicted" and goal_model is None:
            raise CliError(f"no goal checkpoint at {_goal_ckpt(cfg)}; run `pedcov train --target goal` first")
        model = CovNetModel.load(_cov_ckpt(cfg))

        def run(windows):
            goals = compute_goals(windows, goal_model, goal_source)
            means = compute_sfm_means(windows, goals, params, goal_model)
            return predict_covnet(windows, means, model, cfg.eval_mode, cfg.seed)

        return run

    if goal_source == "predicted" and goal_model is None:
        log.warning("fp: no goal checkpoint, using ground-truth endpoints as goals")
        goal_source = "ground-truth-endpoint"

    def run_fp(windows):
        goals = compute_goals(windows, goal_model, goal_source)
        return predict_fp(windows, goals, params, goal_model)

    return run_fp


def eval_dir(cfg: RunConfig, predictor: str | None = None) -> Path:
    return cfg.out / f"eval_{predictor or cfg.predictor}"


def cmd_eval(cfg: RunConfig, predictor_fn: PredictorFn | None = None) -> CalibrationReport:
    """Score the held-out scene; ``predictor_fn`` replaces the configured predictor (test hook)."""
    cfg.validate()
    scenes = _load_scenes(cfg)
    plan, _, test_windows = _split(cfg, scenes)
    if not test_windows:
        raise CliError(f"held-out scene {plan.test_scene!r} has no windows")
    predict = predictor_fn or _make_predictor(cfg)
    preds = predict(test_windows)
    records = [EvalRecord(p, w.fut) for p, w in zip(preds, test_windows)]
    report = build_report(records, {"predictor": cfg.predictor, "test_scene": plan.test_scene,
                                    "goal_source": cfg.goal_source, "seed": cfg.seed})
    final = eval_dir(cfg)
    cfg.out.mkdir(parents=True, exist_ok=True)
    tmp = Path(tempfile.mkdtemp(prefix=".eval-", dir=cfg.out))
    try:
        report.write_json(tmp / "report.json")
        report.write_csv(tmp / "report.csv")
        write_curves(report, tmp)
        if final.exists():
            shutil.rmtree(final)
        tmp.rename(final)
    except BaseException:
        shutil.rmtree(tmp, ignore_errors=True)
        raise
    return report


def cmd_report(cfg: RunConfig) -> str:
    rows = []
    for predictor in PREDICTORS:
        path = eval_dir(cfg, predictor) / "report.json"
        if path.exists():
            rows.append((predictor, CalibrationReport.read_json(path)))
    if not rows:
        raise CliError(f"no evaluation reports under {cfg.out}; run `pedcov eval` first")
    header = "method\tADE\tFDE\tPPEI1 % (delta)\tPPEI3 % (delta)\tmedian MD"
    lines = [header]
    for name, r in rows:
        d = r.deltas
        lines.append(
            f"{name}\t{r.ade:.2f}\t{r.fde:.2f}\t{100 * r.ppei1_mean:.1f}+-{100 * r.ppei1_std:.1f} ({100 * d['ppei1']:+.1f})"
            f"\t{100 * r.ppei3_mean:.1f}+-{100 * r.ppei3_std:.1f} ({100 * d['ppei3']:+.1f})\t{r.md_median:.2f}"
        )
    table = "\n".join(lines) + "\n"
    (cfg.out / "report_table.tsv").write_text(table)
    return table


def cmd_synth(out: Path, n_scenes: int, count: int, seed: int, kind: str, frame_stride: int) -> list[Path]:
    out.mkdir(parents=True, exist_ok=True)
    paths = []
    for k in range(n_scenes):
        path = out / f"synth{k}.txt"
        write_synthetic_scene(path, SyntheticSpec(kind=kind, count=count, seed=seed + k), frame_stride)
        paths.append(path)
    return paths


# ---------------------------------------------------------------------------
# argparse front end
# ---------------------------------------------------------------------------

def _parse_set(values: list[str] | None) -> dict:
    out = {}
    for item in values or []:
        if "=" not in item:
            raise CliError(f"--set expects key=value, got {item!r}")
        key, raw = item.split("=", 1)
        try:
            out[key] = json.loads(raw)
        except json.JSONDecodeError:
            out[key] = raw
    return out


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="pedcov", description=__doc__.split("\n\n")[0])
    parser.add_argument("-v", "--verbose", action="store_true")
    sub = parser.add_subparsers(dest="command", required=True)

    def common(p):
        p.add_argument("--config", help="JSON run configuration")
        p.add_argument("--data-dir")
        p.add_argument("--output-dir")
        p.add_argument("--scenes", nargs="+")
        p.add_argument("--test-scene")
        p.add_argument("--split-index", type=int)
        p.add_argument("--goal-source", choices=["predicted", "ground-truth-endpoint"])
        p.add_argument("--seed", type=int)
        p.add_argument("--frame-stride", type=int)
        p.add_argument("--set", action="append", metavar="KEY=VALUE",
                       help="override any config key, dotted for nested (e.g. train.epochs=20)")

    p = sub.add_parser("ingest", help="parse scenes and write the window cache")
    common(p)
    p = sub.add_parser("train", help="train the goal model or CovarianceNet")
    common(p)
    p.add_argument("--target", choices=["goal", "cov"], required=True)
    p = sub.add_parser("eval", help="evaluate a predictor on the held-out scene")
    common(p)
    p.add_argument("--predictor", choices=list(PREDICTORS))
    p.add_argument("--eval-mode", choices=["prior-mean", "prior-sample"])
    p = sub.add_parser("report", help="tabulate evaluation reports")
    common(p)
    p = sub.add_parser("synth", help="write synthetic scene files")
    p.add_argument("--out", required=True)
    p.add_argument("--scenes", type=int, default=5)
    p.add_argument("--count", type=int, default=400)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--kind", choices=["heteroscedastic", "constant-velocity"], default="heteroscedastic")
    p.add_argument("--frame-stride", type=int, default=10)
    return parser


def _config_from_args(args) -> RunConfig:
    overrides = {
        "data_dir": args.data_dir,
        "output_dir": args.output_dir,
        "scenes": args.scenes,
        "test_scene": args.test_scene,
        "split_index": args.split_index,
        "goal_source": args.goal_source,
        "seed": args.seed,
        "frame_stride": args.frame_stride,
        "predictor": getattr(args, "predictor", None),
        "eval_mode": getattr(args, "eval_mode", None),
    }
    overrides.update(_parse_set(args.set))
    return load_config(args.config, overrides)


def main(argv: Sequence[str] | None = None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        if args.command == "synth":
            for path in cmd_synth(Path(args.out), args.scenes, args.count, args.seed, args.kind, args.frame_stride):
                print(path)
            return 0
        cfg = _config_from_args(args)
        if args.command == "ingest":
            scenes = cmd_ingest(cfg)
            print((cfg.out / "ingest_summary.txt").read_text(), end="")
            log.info("%d scenes", len(scenes))
        elif args.command == "train":
            print(cmd_train(cfg, args.target))
        elif args.command == "eval":
            print(cmd_eval(cfg).summary_table())
        elif args.command == "report":
            print(cmd_report(cfg), end="")
    except (CliError, AnnotationError, FileNotFoundError, ValueError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 1
    return 0


if __name__ == "__main__":
    sys.exit(main())
