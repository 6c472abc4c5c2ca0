"""Command-line entry point: configuration, seeding, and artifact wiring.

Subcommands cover the full pipeline:

    collect-dataset  random-policy feature dataset (+ pixel projection)
    train-codec      codebook ensemble for levels 1..V
    train-robot      robot actor-critic on finest-level messages
    train-regressor  semantic state regressor on greedy-robot traces
    train-observer   level-selection policy for one (level, beta)
    evaluate         metric points + traces for every available scheme
    analyze          heatmap / AoI CSVs from saved traces

Configuration is flat INI-style key-value text with sections; command-line
flags override file values. All artifacts land in the output directory and
are byte-reproducible from the seed.
"""

from __future__ import annotations

import argparse
import configparser
import dataclasses
import struct
import sys
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from . import agents, codec, env, evaluation, loop, neural
from .seeding import substream

EXIT_OK = 0
EXIT_USER_ERROR = 1
EXIT_INTERNAL = 2

_DATASET_MAGIC = b"EFDS"
_DATASET_VERSION = 1


class ConfigError(ValueError):
    pass


@dataclass(frozen=True)
class CodecConfig:
    features: int = codec.DEFAULT_FEATURES
    levels: int = codec.DEFAULT_LEVELS
    codeword_dim: int = 1
    dataset_size: int = 50_000
    heldout_size: int = 5_000
    kmeans_iters: int = 100
    kmeans_restarts: int = 4
    pool: int = 8

    def __post_init__(self):
        if self.features < 1 or self.levels < 1 or self.codeword_dim < 1:
            raise ConfigError("features, levels, and codeword_dim must be >= 1")
        if self.dataset_size < 2**self.levels:
            raise ConfigError("dataset_size too small for the largest codebook")


@dataclass(frozen=True)
class EvalConfig:
    episodes: int = 1000
    trace_episodes: int = 200
    heatmap_bins: int = 20
    heatmap_min_count: int = 20
    entropy_bins: int = 10
    beta_grid_a: tuple[float, ...] = (0.5, 1.0, 2.0)
    beta_grid_b: tuple[float, ...] = (0.001, 0.005, 0.01)
    beta_grid_c: tuple[float, ...] = (0.01, 0.05, 0.15)

    def __post_init__(self):
        if self.episodes < 1:
            raise ConfigError("episodes must be >= 1")


@dataclass(frozen=True)
class RunConfig:
    env: env.EnvConfig = field(default_factory=env.EnvConfig)
    codec: CodecConfig = field(default_factory=CodecConfig)
    train: agents.TrainConfig = field(default_factory=agents.TrainConfig)
    eval: EvalConfig = field(default_factory=EvalConfig)
    seed: int = 0
    out: str = "runs/default"

    def __post_init__(self):
        if self.env.obs_mode == env.VECTOR_MODE and self.codec.features != 8:
            raise ConfigError("vector-mode features are fixed at 8 (4 coords + 4 diffs)")


_SECTIONS = {
    "env": env.EnvConfig,
    "codec": CodecConfig,
    "train": agents.TrainConfig,
    "eval": EvalConfig,
    "run": None,  # seed / out live on RunConfig itself
}
_RUN_KEYS = ("seed", "out")


def _coerce(raw: str, default) -> object:
    if isinstance(default, bool):
        low = raw.strip().lower()
        if low in ("1", "true", "yes", "on"):
            return True
        if low in ("0", "false", "no", "off"):
            return False
        raise ConfigError(f"cannot parse boolean from {raw!r}")
    if isinstance(default, int):
        return int(raw)
    if isinstance(default, float):
        return float(raw)
    if isinstance(default, tuple):
        return tuple(float(part) for part in raw.split(",") if part.strip())
    return raw


def parse_config(path: str | None = None, overrides: dict | None = None) -> RunConfig:
    """Load, validate, and default-fill a run configuration.

    Unknown sections or keys are rejected by name; `overrides` (flag values)
    are applied after the file.
    """
    section_values: dict[str, dict] = {name: {} for name in _SECTIONS}
    if path is not None:
        parser = configparser.ConfigParser(interpolation=None)
        read = parser.read(path)
        if not read:
            raise ConfigError(f"config file not found: {path}")
        for section in parser.sections():
            if section not in _SECTIONS:
                raise ConfigError(f"unknown config section [{section}]")
            cls = _SECTIONS[section]
            if cls is None:
                valid = set(_RUN_KEYS)
                defaults = {"seed": 0, "out": "runs/default"}
            else:
                valid = {f.name for f in dataclasses.fields(cls)}
                defaults = {f.name: f.default for f in dataclasses.fields(cls)}
            for key, raw in parser.items(section):
                if key not in valid:
                    raise ConfigError(f"unknown key '{key}' in section [{section}]")
                section_values[section][key] = _coerce(raw, defaults[key])
    overrides = overrides or {}
    for key, value in overrides.items():
        if value is None:
            continue
        section, name = key.split(".", 1)
        section_values[section][name] = value
    try:
        run_kwargs = section_values["run"]
        cfg = RunConfig(
            env=env.EnvConfig(**section_values["env"]),
            codec=CodecConfig(**section_values["codec"]),
            train=agents.TrainConfig(**section_values["train"]),
            eval=EvalConfig(**section_values["eval"]),
            seed=int(run_kwargs.get("seed", 0)),
            out=str(run_kwargs.get("out", "runs/default")),
        )
    except (TypeError, ValueError) as exc:
        raise ConfigError(str(exc)) from exc
    return cfg


def write_effective_config(cfg: RunConfig, out_dir: Path) -> None:
    parser = configparser.ConfigParser(interpolation=None)
    for section, obj in (
        ("env", cfg.env),
        ("codec", cfg.codec),
        ("train", cfg.train),
        ("eval", cfg.eval),
    ):
        parser[section] = {}
        for f in dataclasses.fields(obj):
            value = getattr(obj, f.name)
            if isinstance(value, tuple):
                value = ",".join(repr(v) for v in value)
            elif isinstance(value, float):
                value = repr(value)
            parser[section][f.name] = str(value)
    parser["run"] = {"seed": str(cfg.seed), "out": cfg.out}
    with open(out_dir / "effective_config.ini", "w") as fh:
        parser.write(fh)


# ---------------------------------------------------------------------------
# Artifact paths and formats


class Artifacts:
    """Canonical file locations inside one output directory."""

    def __init__(self, out: str | Path):
        self.root = Path(out)
        self.dataset = self.root / "dataset.bin"
        self.projection = self.root / "projection.bin"
        self.codebooks = self.root / "codebooks.bin"
        self.robot = self.root / "robot.ckpt"
        self.regressor = self.root / "regressor.ckpt"
        self.logs = self.root / "logs"
        self.eval_dir = self.root / "eval"
        self.traces = self.eval_dir / "traces"
        self.analysis = self.root / "analysis"

    def observer(self, level: str, beta: float) -> Path:
        return self.root / f"observer_{level}_beta{beta:g}.ckpt"

    def observer_checkpoints(self) -> list[tuple[str, float, Path]]:
        found = []
        for path in sorted(self.root.glob("observer_*_beta*.ckpt")):
            stem = path.stem  # observer_<L>_beta<value>
            try:
                _, level, beta_part = stem.split("_", 2)
                beta = float(beta_part.removeprefix("beta"))
            except ValueError:
                continue
            found.append((level, beta, path))
        found.sort(key=lambda item: (item[0], item[1]))
        return found

    def require(self, path: Path, hint: str) -> Path:
        if not path.exists():
            raise FileNotFoundError(f"missing {hint}: {path} (run '{_PRODUCERS[hint]}' first)")
        return path


_PRODUCERS = {
    "dataset": "effcomm collect-dataset",
    "codebooks": "effcomm train-codec",
    "robot checkpoint": "effcomm train-robot",
    "regressor checkpoint": "effcomm train-regressor",
}


def save_dataset(path, train: np.ndarray, heldout: np.ndarray, k: int = 1) -> None:
    with open(path, "wb") as fh:
        fh.write(_DATASET_MAGIC)
        fh.write(
            struct.pack(
                "<IIIQQ", _DATASET_VERSION, train.shape[1], k,
                train.shape[0], heldout.shape[0],
            )
        )
        fh.write(np.ascontiguousarray(train, dtype="<f8").tobytes())
        fh.write(np.ascontiguousarray(heldout, dtype="<f8").tobytes())


def load_dataset(path) -> tuple[np.ndarray, np.ndarray, int]:
    with open(path, "rb") as fh:
        if fh.read(4) != _DATASET_MAGIC:
            raise ValueError(f"{path}: not a dataset file")
        version, n_feat, k, n_train, n_held = struct.unpack("<IIIQQ", fh.read(28))
        if version != _DATASET_VERSION:
            raise ValueError(f"{path}: unsupported dataset version {version}")
        train = np.frombuffer(fh.read(n_train * n_feat * 8), dtype="<f8")
        held = np.frombuffer(fh.read(n_held * n_feat * 8), dtype="<f8")
    return (
        train.reshape(n_train, n_feat).astype(np.float64),
        held.reshape(n_held, n_feat).astype(np.float64),
        k,
    )


# ---------------------------------------------------------------------------
# Subcommand implementations


def cmd_collect_dataset(cfg: RunConfig, art: Artifacts) -> None:
    """Random-policy rollouts until dataset_size + heldout_size feature rows."""
    total = cfg.codec.dataset_size + cfg.codec.heldout_size
    rng = substream(cfg.seed, "dataset")
    pixel = cfg.env.obs_mode == env.PIXEL_MODE
    rows: list[np.ndarray] = []
    while len(rows) < total:
        state = env.reset(rng, cfg.env)
        prev = state
        for t in range(cfg.env.horizon):
            obs = env.observe(prev, state, cfg.env, rng)
            if pixel:
                rows.append(codec.pool_frame_pair(obs, cfg.codec.pool))
            else:
                rows.append(codec.extract_features(obs, scales=cfg.env.scales))
            if len(rows) >= total:
                break
            action = int(rng.integers(2))
            nxt, _, done = env.step(state, action, cfg.env, t=t)
            prev, state = state, nxt
            if done:
                break
    if pixel:
        patches = np.array(rows)
        projection = codec.train_patch_projection(
            patches[: cfg.codec.dataset_size], cfg.codec.features, cfg.codec.pool
        )
        codec.save_projection(art.projection, projection)
        data = projection.apply(patches)
    else:
        data = np.array(rows)
    save_dataset(
        art.dataset,
        data[: cfg.codec.dataset_size],
        data[cfg.codec.dataset_size : total],
        cfg.codec.codeword_dim,
    )
    print(f"dataset: {cfg.codec.dataset_size} train + {cfg.codec.heldout_size} held-out rows")


def cmd_train_codec(cfg: RunConfig, art: Artifacts) -> None:
    train, _, k = load_dataset(art.require(art.dataset, "dataset"))
    data = train if k == 1 else train.reshape(train.shape[0], -1, k)
    rng = substream(cfg.seed, "codec")
    ensemble = codec.train_ensemble(
        data,
        rng,
        max_level=cfg.codec.levels,
        max_iter=cfg.codec.kmeans_iters,
        n_init=cfg.codec.kmeans_restarts,
    )
    codec.save_ensemble(art.codebooks, ensemble)
    for book in ensemble.books:
        mse = codec.quantization_mse(data, book).mean()
        print(f"level {book.level}: train quantization MSE {mse:.3e}")


def cmd_train_robot(cfg: RunConfig, art: Artifacts) -> None:
    ensemble = codec.load_ensemble(art.require(art.codebooks, "codebooks"))
    art.logs.mkdir(parents=True, exist_ok=True)
    robot = agents.train_robot_a2c(
        cfg.env, ensemble, cfg.train, log_path=art.logs / "train_robot.csv",
        projection=_load_projection(cfg, art),
    )
    neural.save_checkpoint(art.robot, robot.spec, robot.params)
    print(f"robot checkpoint: {art.robot}")


def cmd_train_regressor(cfg: RunConfig, art: Artifacts) -> None:
    ensemble = codec.load_ensemble(art.require(art.codebooks, "codebooks"))
    robot = _load_robot(cfg, art, ensemble)
    art.logs.mkdir(parents=True, exist_ok=True)
    regressor = agents.train_regressor(
        cfg.env, ensemble, robot, cfg.train, log_path=art.logs / "train_regressor.csv",
        projection=_load_projection(cfg, art),
    )
    neural.save_checkpoint(art.regressor, regressor.spec, regressor.params)
    print(f"regressor checkpoint: {art.regressor}")


def cmd_train_observer(cfg: RunConfig, art: Artifacts) -> None:
    ensemble = codec.load_ensemble(art.require(art.codebooks, "codebooks"))
    robot = _load_robot(cfg, art, ensemble)
    regressor = None
    if cfg.train.level == agents.LEVEL_B:
        regressor = _load_regressor(cfg, art, ensemble)
    art.logs.mkdir(parents=True, exist_ok=True)
    log_path = art.logs / f"train_observer_{cfg.train.level}_beta{cfg.train.beta:g}.csv"
    observer = agents.train_observer_a2c(
        cfg.env, ensemble, robot, regressor, cfg.train, log_path=log_path,
        projection=_load_projection(cfg, art),
    )
    path = art.observer(cfg.train.level, cfg.train.beta)
    neural.save_checkpoint(path, observer.spec, observer.params)
    print(f"observer checkpoint: {path}")


def cmd_evaluate(cfg: RunConfig, art: Artifacts) -> None:
    """Metric points for static levels and every trained observer checkpoint."""
    ensemble = codec.load_ensemble(art.require(art.codebooks, "codebooks"))
    robot = _load_robot(cfg, art, ensemble)
    regressor = _load_regressor(cfg, art, ensemble)
    art.eval_dir.mkdir(parents=True, exist_ok=True)
    art.traces.mkdir(parents=True, exist_ok=True)

    schemes: list[evaluation.Scheme] = []
    for v in range(1, ensemble.max_level + 1):
        schemes.append(
            evaluation.Scheme(f"static_v{v}", loop.FixedLevelObserver(v))
        )
    for level, beta, path in art.observer_checkpoints():
        spec, params, _, _ = neural.load_checkpoint(path)
        observer = agents.ObserverPolicy(
            spec, params, ensemble.n_features, ensemble.max_level,
            cfg.train.use_aoi_input,
        )
        schemes.append(
            evaluation.Scheme(f"dynamic_{level}_beta{beta:g}", observer, beta, level)
        )

    projection = _load_projection(cfg, art)
    points = []
    for scheme in schemes:
        rng = substream(cfg.seed, f"eval/{scheme.scheme_id}")
        point, traces = evaluation.evaluate_suite(
            scheme,
            cfg.env,
            ensemble,
            robot,
            cfg.eval.episodes,
            rng,
            regressor=regressor,
            keep_traces=cfg.eval.trace_episodes,
            projection=projection,
        )
        points.append(point)
        if traces:
            loop.write_traces(traces, art.traces / f"{scheme.scheme_id}.csv")
        print(
            f"{scheme.scheme_id}: ell {point.ell_mean:.3f} B, "
            f"len {point.ep_len_mean:.1f}, psnr {point.psnr_mean:.2f} dB"
        )
    evaluation.write_pareto_csv(points, art.eval_dir / "pareto.csv")
    evaluation.write_lenhist_csv(points, art.eval_dir / "lenhist.csv")


def cmd_analyze(cfg: RunConfig, art: Artifacts) -> None:
    """Heatmap and AoI-distribution CSVs from every saved trace file."""
    trace_files = sorted(art.traces.glob("*.csv"))
    if not trace_files:
        raise FileNotFoundError(f"no trace files under {art.traces}; run 'effcomm evaluate' first")
    art.analysis.mkdir(parents=True, exist_ok=True)
    for path in trace_files:
        table = loop.read_trace_table(path)
        scheme = path.stem
        for proj, tag in ((("psi", "x_dot"), "psi_xdot"), (("psi", "psi_dot"), "psi_psidot")):
            emap = evaluation.entropy_map(
                table, proj, cfg.eval.heatmap_bins, cfg.eval.heatmap_min_count
            )
            evaluation.write_heatmap_csv(
                emap, art.analysis / f"{scheme}__heatmap_entropy_{tag}.csv"
            )
            bmap = evaluation.bitrate_map(
                table, proj, cfg.eval.heatmap_bins, cfg.eval.heatmap_min_count
            )
            evaluation.write_heatmap_csv(
                bmap, art.analysis / f"{scheme}__heatmap_bitrate_{tag}.csv"
            )
        probs, _ = evaluation.aoi_action_distribution(
            table, cfg.codec.levels, cfg.eval.entropy_bins
        )
        evaluation.write_aoi_csv(probs, art.analysis / f"{scheme}__aoi_dist.csv")
        print(f"analysis written for {scheme}")


def _load_projection(cfg: RunConfig, art: Artifacts):
    if cfg.env.obs_mode != env.PIXEL_MODE:
        return None
    if not art.projection.exists():
        raise FileNotFoundError(
            f"missing pixel projection: {art.projection} (run 'effcomm collect-dataset' first)"
        )
    return codec.load_projection(art.projection)


def _load_robot(cfg: RunConfig, art: Artifacts, ensemble) -> agents.RobotPolicy:
    spec, params, _, _ = neural.load_checkpoint(art.require(art.robot, "robot checkpoint"))
    expected = agents.robot_input_dim(ensemble.n_features, ensemble.max_level)
    if spec.input_dim != expected:
        raise ValueError(f"{art.robot}: input dim {spec.input_dim} != expected {expected}")
    return agents.RobotPolicy(spec, params, ensemble.n_features, ensemble.max_level)


def _load_regressor(cfg: RunConfig, art: Artifacts, ensemble) -> agents.SemanticRegressor:
    spec, params, _, _ = neural.load_checkpoint(
        art.require(art.regressor, "regressor checkpoint")
    )
    return agents.SemanticRegressor(spec, params, ensemble.n_features, ensemble.max_level)


# ---------------------------------------------------------------------------
# Entry point

_COMMANDS = {
    "collect-dataset": cmd_collect_dataset,
    "train-codec": cmd_train_codec,
    "train-robot": cmd_train_robot,
    "train-regressor": cmd_train_regressor,
    "train-observer": cmd_train_observer,
    "evaluate": cmd_evaluate,
    "analyze": cmd_analyze,
}


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="effcomm",
        description="Dynamic feature compression for remote CartPole control.",
    )
    parser.add_argument("command", choices=sorted(_COMMANDS))
    parser.add_argument("--config", help="INI-style configuration file")
    parser.add_argument("--seed", type=int, help="root seed (overrides config)")
    parser.add_argument("--level", choices=["A", "B", "C"], help="observer reward level")
    parser.add_argument("--beta", type=float, help="cost per transmitted byte")
    parser.add_argument("--out", help="output directory (overrides config)")
    return parser


def dispatch(args: argparse.Namespace) -> int:
    overrides = {
        "run.seed": args.seed,
        "run.out": args.out,
        "train.level": args.level,
        "train.beta": args.beta,
    }
    cfg = parse_config(args.config, overrides)
    art = Artifacts(cfg.out)
    art.root.mkdir(parents=True, exist_ok=True)
    write_effective_config(cfg, art.root)
    _COMMANDS[args.command](cfg, art)
    return EXIT_OK


def main(argv: list[str] | None = None) -> int:
    args = build_parser().parse_args(argv)
    try:
        return dispatch(args)
    except (ConfigError, FileNotFoundError, ValueError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_USER_ERROR
    except Exception as exc:  # internal failure
        print(f"internal error: {exc}", file=sys.stderr)
        return EXIT_INTERNAL


if __name__ == "__main__":
    sys.exit(main())
