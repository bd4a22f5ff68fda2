"""Command-line entry point: ``semcorr <command> [options]``.

Every command resolves its parameters from built-in defaults, then an
optional TOML file (``--config``), then explicit flags, and writes the
resolved values to ``config.toml`` in its output directory. Failures print a
single ``error: <Type>: <message>`` line on stderr and exit with status 1.
"""

from __future__ import annotations

import argparse
import csv
import json
import sys
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from . import __version__

if sys.version_info >= (3, 11):
    import tomllib
else:  # pragma: no cover
    import tomli as tomllib


class ConfigError(ValueError):
    pass


@dataclass(frozen=True)
class Param:
    type: type
    default: object
    help: str
    choices: tuple | None = None


_SAMPLING = {
    "points": Param(int, 2048, "points sampled per model"),
    "k": Param(int, 8, "neighbours in the point-cloud graph"),
    "sample_seed": Param(int, 0, "seed of the cloud sampler (model i uses sample_seed + i)"),
}

_MODEL_INPUTS = {
    "model": Param(str, None, "model header written by train (model.json)"),
    "dataset": Param(str, None, "dataset directory or annotation JSON"),
    "split_file": Param(str, None, "split JSON (default: split.json beside the model)"),
    "split": Param(str, "test", "which split to use", ("train", "val", "test")),
}

PARAMS = {
    "synth": {
        "family": Param(str, "tables", "shape family"),
        "models": Param(int, 20, "number of models"),
        "sets": Param(int, 6, "number of correspondence sets"),
        "symmetry": Param(str, "none", "hyperpoint symmetry mode", ("none", "central", "rotational", "both")),
    },
    "train": {
        "dataset": Param(str, None, "dataset directory or annotation JSON"),
        "kind": Param(str, "free_table", "embedding model", ("free_table", "coord_mlp")),
        "dimension": Param(int, 128, "embedding dimension"),
        "epochs": Param(int, 100, "training epochs"),
        "lr": Param(float, 0.001, "Adam learning rate"),
        "lr_decay": Param(float, 0.9, "learning-rate decay factor"),
        "decay_every": Param(int, 10, "epochs between decays"),
        "lambda": Param(float, 1.0, "push-loss weight"),
        "batch_models": Param(int, 4, "models per minibatch"),
        "eval_every": Param(int, 10, "epochs between validation evaluations"),
        "same_model_negatives": Param(bool, False, "allow negative pairs on one model"),
        "fit": Param(str, "auto", "models the loss sees: auto = all for free_table, train split for coord_mlp",
                     ("auto", "train", "all")),
        **_SAMPLING,
    },
    "eval": {
        **_MODEL_INPUTS,
        "random_baseline": Param(bool, False, "also report random embeddings"),
        "random_trials": Param(int, 1, "random-baseline repetitions"),
        "ply": Param(bool, False, "export clouds coloured by embedding principal components"),
        **_SAMPLING,
    },
    "register": {
        **_MODEL_INPUTS,
        "level": Param(str, "easy", "perturbation level", ("easy", "medium", "hard")),
        "pairs": Param(int, 30, "ordered model pairs to register"),
        "iterations": Param(int, 1000, "RANSAC iterations"),
        "inlier_threshold": Param(float, 0.05, "RANSAC inlier distance"),
        "icp_iters": Param(int, 50, "ICP iteration cap"),
        **_SAMPLING,
    },
    "match-partial": {
        **_MODEL_INPUTS,
        "keep_fraction": Param(float, 0.7, "fraction of points kept after cropping"),
        "ply": Param(bool, True, "export coloured partial and complete clouds"),
        **_SAMPLING,
    },
    "geodesic": {
        "mesh": Param(str, None, "OBJ file"),
        "graph": Param(str, "cloud", "graph over mesh vertices or over a sampled cloud", ("mesh", "cloud")),
        "sources": Param(str, "0", "comma-separated source node indices"),
        "normalize": Param(bool, True, "normalize the mesh into the dataset sphere first"),
        **_SAMPLING,
    },
}

GLOBAL = {
    "seed": Param(int, 0, "seed of every random choice the command makes"),
    "threads": Param(int, 1, "worker threads for sampling and graph building"),
}


@dataclass
class RunConfig:
    command: str
    values: dict = field(default_factory=dict)

    def __getitem__(self, key):
        return self.values[key]

    def to_toml(self) -> str:
        lines = [f"# semcorr {__version__}", f'command = "{self.command}"', f'version = "{__version__}"']
        for key in sorted(self.values):
            lines.append(f"{key} = {_toml_value(self.values[key])}")
        return "\n".join(lines) + "\n"

    def write(self, out_dir: Path) -> Path:
        path = out_dir / "config.toml"
        path.write_text(self.to_toml())
        return path


def _toml_value(v) -> str:
    if v is None:
        return '""'
    if isinstance(v, bool):
        return "true" if v else "false"
    if isinstance(v, (int, float)):
        return repr(v)
    return json.dumps(str(v))


def _coerce(key, spec: Param, value):
    if spec.type is bool:
        if not isinstance(value, bool):
            raise ConfigError(f"{key} must be true or false, got {value!r}")
    elif spec.type is int:
        if isinstance(value, bool) or not isinstance(value, int):
            raise ConfigError(f"{key} must be an integer, got {value!r}")
    elif spec.type is float:
        if isinstance(value, bool) or not isinstance(value, (int, float)):
            raise ConfigError(f"{key} must be a number, got {value!r}")
        value = float(value)
    else:
        value = str(value)
    if spec.choices is not None and value not in spec.choices:
        raise ConfigError(f"{key} must be one of {', '.join(spec.choices)}, got {value!r}")
    return value


def resolve_config(command: str, file_path: str | None, overrides: dict) -> RunConfig:
    """Defaults, then the TOML file, then explicit flags; unknown keys are rejected."""
    specs = {**GLOBAL, **PARAMS[command]}
    values = {k: s.default for k, s in specs.items()}
    if file_path:
        try:
            with open(file_path, "rb") as fh:
                doc = tomllib.load(fh)
        except tomllib.TOMLDecodeError as e:
            raise ConfigError(f"{file_path}: {e}") from None
        doc.pop("command", None)
        doc.pop("version", None)
        unknown = sorted(set(doc) - set(specs))
        if unknown:
            raise ConfigError(f"unknown config keys for {command}: {', '.join(unknown)}")
        for k, v in doc.items():
            values[k] = _coerce(k, specs[k], v)
    for k, v in overrides.items():
        if v is not None:
            values[k] = _coerce(k, specs[k], v)
    return RunConfig(command, values)


def _require(cfg: RunConfig, *keys):
    for k in keys:
        if cfg[k] in (None, ""):
            raise ConfigError(f"{cfg.command} needs --{k.replace('_', '-')}")


# ---------------------------------------------------------------------------
# shared loading


def _load_dataset(path):
    from .corrset import parse_dataset

    path = Path(path)
    if path.is_dir():
        path = path / "annotations.json"
    if not path.exists():
        raise FileNotFoundError(f"annotation file not found: {path}")
    return parse_dataset(path)


def _prepare(cfg: RunConfig, ds):
    from .pipeline import prepare

    return prepare(ds, cfg["points"], cfg["k"], seed=cfg["sample_seed"], threads=cfg["threads"])


def _load_split(cfg: RunConfig):
    from .corrset import Split

    path = Path(cfg["split_file"]) if cfg["split_file"] else Path(cfg["model"]).parent / "split.json"
    if not path.exists():
        raise FileNotFoundError(f"split file not found: {path}")
    return Split.from_json(path.read_text())


def _load_model(cfg: RunConfig, prepared):
    from .embedding import EmbeddingError, load_model

    path = Path(cfg["model"])
    if not path.exists():
        raise FileNotFoundError(f"model file not found: {path}")
    model = load_model(path)
    if model.kind == "free_table":
        missing = [m for m in prepared.dataset.models if m not in model.models]
        if missing:
            raise EmbeddingError(f"free_table model has no table for models {missing}")
        bad = [m for m in prepared.dataset.models if len(model.params[f"table:{m}"]) != len(prepared.clouds[m])]
        if bad:
            raise EmbeddingError(f"free_table sizes differ from the sampled clouds for {bad}; "
                                 "use the points/sample_seed the model was trained with")
    return model


def _write_csv(path: Path, header, rows):
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(header)
        w.writerows(rows)


def _g(x: float) -> str:
    return f"{x:.9g}"


def embedding_colors(emb: np.ndarray) -> np.ndarray:
    """RGB in 0..255 from the first three principal components, each stretched to its range."""
    centered = emb - emb.mean(axis=0)
    _, _, vt = np.linalg.svd(centered, full_matrices=False)
    comps = centered @ vt[:3].T
    # Fix each component's sign so the export does not depend on the SVD's choice.
    comps *= np.where(np.abs(comps.max(axis=0)) >= np.abs(comps.min(axis=0)), 1.0, -1.0)
    if comps.shape[1] < 3:
        comps = np.pad(comps, ((0, 0), (0, 3 - comps.shape[1])))
    lo, hi = comps.min(axis=0), comps.max(axis=0)
    span = np.where(hi > lo, hi - lo, 1.0)
    return np.rint(255.0 * (comps - lo) / span).astype(np.uint8)


# ---------------------------------------------------------------------------
# commands


def cmd_synth(cfg: RunConfig, out: Path, log):
    from .synth import synthesize_category

    ds = synthesize_category(cfg["family"], cfg["models"], cfg["sets"], seed=cfg["seed"], out_dir=out,
                             symmetry_mode=cfg["symmetry"])
    log(f"wrote {len(ds.models)} meshes and {len(ds.sets)} sets to {out}")


def cmd_train(cfg: RunConfig, out: Path, log):
    from .corrset import split_models
    from .embedding import TrainConfig, save_model, train, write_history
    from .metrics import mge
    from .plotting import loss_curve

    _require(cfg, "dataset")
    prepared = _prepare(cfg, _load_dataset(cfg["dataset"]))
    ds = prepared.dataset
    split = split_models(ds, cfg["seed"])
    tc = TrainConfig(kind=cfg["kind"], dimension=cfg["dimension"], lr=cfg["lr"], lr_decay=cfg["lr_decay"],
                     decay_every=cfg["decay_every"], lam=cfg["lambda"], epochs=cfg["epochs"],
                     batch_models=cfg["batch_models"], seed=cfg["seed"], eval_every=cfg["eval_every"],
                     same_model_negatives=cfg["same_model_negatives"])
    fit = cfg["fit"]
    if fit == "auto":
        fit = "all" if cfg["kind"] == "free_table" else "train"
    fit_models = list(ds.models) if fit == "all" else list(split.train)
    result = train(ds, prepared.clouds, prepared.geodesics, tc, fit_models=fit_models,
                   val_models=split.val, log=log)
    save_model(result.model, out / "model.json")
    write_history(result.history, out / "history.csv")
    (out / "split.json").write_text(split.to_json())
    _write_csv(out / "validation.csv", ["epoch", "val_mge"], [[e, _g(v)] for e, v in result.val_history])
    test = mge(result.model, ds, prepared.clouds, geodesics=prepared.geodesics, models=split.test)
    summary = {"best_epoch": result.best_epoch, "fit": fit, "test_mge": test.mge, "test_mee": test.mee,
               "steps": len(result.history)}
    (out / "summary.json").write_text(json.dumps(summary, indent=1, sort_keys=True))
    loss_curve(result.history, out / "loss.png", result.val_history)
    log(f"best epoch {result.best_epoch}, test mGE {test.mge:.4f}")


def cmd_eval(cfg: RunConfig, out: Path, log):
    from .geometry import write_ply
    from .metrics import EvalReport, mge, random_baseline
    from .plotting import per_set_bars

    _require(cfg, "model", "dataset")
    split = _load_split(cfg)
    prepared = _prepare(cfg, _load_dataset(cfg["dataset"]))
    model = _load_model(cfg, prepared)
    models = split[cfg["split"]]
    report = mge(model, prepared.dataset, prepared.clouds, geodesics=prepared.geodesics, models=models)
    rows = [[model.kind, *report.csv_row()]]
    (out / "eval.json").write_text(report.to_json())
    baseline = None
    if cfg["random_baseline"]:
        baseline = random_baseline(prepared.dataset, prepared.clouds, geodesics=prepared.geodesics,
                                   trials=cfg["random_trials"], seed=cfg["seed"], models=models,
                                   dimension=model.dimension)
        rows.append(["random", *baseline.csv_row()])
        (out / "random.json").write_text(baseline.to_json())
    _write_csv(out / "eval.csv", ["method", *EvalReport.CSV_HEADER], rows)
    per_set_bars(report, out / "per_set.png", baseline)
    if cfg["ply"]:
        for m in models:
            cloud = prepared.clouds[m]
            write_ply(out / f"{m}.ply", cloud.points, embedding_colors(model.embed_cloud(cloud)))
    log(f"{cfg['split']} mGE {report.mge:.4f} over {report.pair_count} pairs")


def _ordered_pairs(models, n, rng):
    pairs = [(a, b) for a in models for b in models if a != b]
    if not pairs:
        raise ValueError("need at least two models in the split to form pairs")
    if n >= len(pairs):
        return pairs
    keep = np.sort(rng.choice(len(pairs), size=n, replace=False))
    return [pairs[i] for i in keep]


def cmd_register(cfg: RunConfig, out: Path, log):
    from .plotting import registration_scatter
    from .registration import LEVELS, RegistrationError, perturb, register

    _require(cfg, "model", "dataset")
    split = _load_split(cfg)
    prepared = _prepare(cfg, _load_dataset(cfg["dataset"]))
    model = _load_model(cfg, prepared)
    if model.kind != "coord_mlp":
        raise RegistrationError(f"register needs a coord_mlp model, got {model.kind}")
    rng = np.random.default_rng(cfg["seed"])
    level = LEVELS[cfg["level"]]
    rows = []
    for a, b in _ordered_pairs(split[cfg["split"]], cfg["pairs"], rng):
        tgt, gt = perturb(prepared.clouds[b], level, rng)
        r = register(prepared.clouds[a], tgt, model, rng, gt, iterations=cfg["iterations"],
                     inlier_threshold=cfg["inlier_threshold"], icp_iters=cfg["icp_iters"])
        rows.append({"category": prepared.dataset.category, "pair_id": f"{a}:{b}", "level": level.name,
                     "rot_error_deg": r.rot_error, "trans_error": r.trans_error, "inliers": r.inlier_count,
                     "method": "embedding_ransac_icp"})
    header = ["category", "pair_id", "level", "rot_error_deg", "trans_error", "inliers", "method"]
    _write_csv(out / "registration.csv", header,
               [[r[h] if not isinstance(r[h], float) else _g(r[h]) for h in header] for r in rows])
    rot = np.array([r["rot_error_deg"] for r in rows])
    trans = np.array([r["trans_error"] for r in rows])
    _write_csv(out / "registration_summary.csv",
               ["category", "level", "pairs", "median_rot_error_deg", "median_trans_error",
                "mean_rot_error_deg", "mean_trans_error"],
               [[prepared.dataset.category, level.name, len(rows), _g(np.median(rot)), _g(np.median(trans)),
                 _g(rot.mean()), _g(trans.mean())]])
    registration_scatter(rows, out / "registration.png")
    log(f"{len(rows)} pairs: median rotation error {np.median(rot):.3f} deg, "
        f"translation {np.median(trans):.4f}")


def cmd_match_partial(cfg: RunConfig, out: Path, log):
    from .corrset import crop_partial
    from .geometry import write_ply
    from .metrics import partial_matching
    from .plotting import error_histogram
    from .registration import RegistrationError

    _require(cfg, "model", "dataset")
    keep = cfg["keep_fraction"]
    if not 0.0 < keep < 1.0:
        raise ValueError(f"keep_fraction must lie in (0, 1), got {keep}")
    split = _load_split(cfg)
    prepared = _prepare(cfg, _load_dataset(cfg["dataset"]))
    model = _load_model(cfg, prepared)
    if model.kind != "coord_mlp":
        raise RegistrationError(f"match-partial needs a coord_mlp model, got {model.kind}")
    models = list(split[cfg["split"]])
    if len(models) < 2:
        raise ValueError("need at least two models in the split")
    pairs = [(m, models[(i + 1) % len(models)]) for i, m in enumerate(models)]
    matches = partial_matching(model, prepared.dataset, prepared.clouds, prepared.geodesics, pairs, keep,
                               seed=cfg["seed"])
    if not matches:
        raise ValueError("no annotated point survived the crop")
    header = ["category", "partial_model", "complete_model", "set_id", "partial_index", "retrieved",
              "geodesic_error", "uncropped_error"]
    cat = prepared.dataset.category
    _write_csv(out / "partial_matches.csv", header,
               [[cat, m.partial_model, m.complete_model, m.set_id, m.partial_index, m.retrieved,
                 _g(m.error), _g(m.uncropped_error)] for m in matches])
    err = np.array([m.error for m in matches])
    ref = np.array([m.uncropped_error for m in matches])
    _write_csv(out / "partial_summary.csv",
               ["category", "keep_fraction", "points", "median_error", "median_uncropped_error", "mean_error"],
               [[cat, _g(keep), len(matches), _g(np.median(err)), _g(np.median(ref)), _g(err.mean())]])
    error_histogram(err, out / "partial_errors.png", reference=ref)
    if cfg["ply"]:
        for k, (mp, mq) in enumerate(pairs):
            part = crop_partial(prepared.clouds[mp], keep, seed=cfg["seed"] + k)
            write_ply(out / f"partial_{mp}.ply", part.points, embedding_colors(model.embed_cloud(part)))
            full = prepared.clouds[mq]
            write_ply(out / f"complete_{mq}.ply", full.points, embedding_colors(model.embed_cloud(full)))
    log(f"{len(matches)} surviving points: median geodesic error {np.median(err):.4f} "
        f"(uncropped {np.median(ref):.4f})")


def cmd_geodesic(cfg: RunConfig, out: Path, log):
    from .geometry import (DATASET_RADIUS, build_graph, geodesics_from, load_mesh, normalize_unit_sphere,
                           sample_cloud, write_ply)
    from .plotting import error_histogram

    _require(cfg, "mesh")
    mesh = load_mesh(cfg["mesh"])
    if cfg["normalize"]:
        mesh = normalize_unit_sphere(mesh, DATASET_RADIUS)
    if cfg["graph"] == "mesh":
        points, graph = mesh.vertices, build_graph(mesh)
    else:
        cloud = sample_cloud(mesh, cfg["points"], seed=cfg["sample_seed"])
        points, graph = cloud.points, build_graph(cloud, cfg["k"])
    try:
        sources = [int(s) for s in str(cfg["sources"]).split(",") if s.strip()]
    except ValueError:
        raise ConfigError(f"sources must be comma-separated integers, got {cfg['sources']!r}") from None
    dm = geodesics_from(graph, sources)
    dm.to_csv(out / "distances.csv")
    d0 = dm.distances[0]
    finite = d0[np.isfinite(d0)]
    scaled = d0 / finite.max() if finite.size and finite.max() > 0 else np.zeros_like(d0)
    colors = np.stack([255 * scaled, np.zeros_like(scaled), 255 * (1 - scaled)], axis=1)
    write_ply(out / "distance_field.ply", points, np.rint(colors))
    error_histogram(finite, out / "distances.png", title=f"geodesic distances from node {sources[0]}")
    log(f"{graph.node_count} nodes, {len(sources)} sources, max distance {finite.max():.4f}")


COMMANDS = {
    "synth": (cmd_synth, "generate a synthetic annotated category"),
    "train": (cmd_train, "train an embedding model"),
    "eval": (cmd_eval, "mean geodesic / Euclidean error on a split"),
    "register": (cmd_register, "cross-object rigid registration through embeddings"),
    "match-partial": (cmd_match_partial, "match cropped objects to complete ones"),
    "geodesic": (cmd_geodesic, "export a geodesic distance field"),
}


def _add_params(p: argparse.ArgumentParser, specs: dict):
    for key, s in specs.items():
        flag = "--" + key.replace("_", "-")
        if s.type is bool:
            p.add_argument(flag, dest=key, action=argparse.BooleanOptionalAction, default=None, help=s.help)
        else:
            p.add_argument(flag, dest=key, type=s.type, default=None, choices=s.choices,
                           help=f"{s.help} (default: {s.default})")


def build_parser() -> argparse.ArgumentParser:
    common = argparse.ArgumentParser(add_help=False)
    _add_params(common, GLOBAL)
    common.add_argument("--config", help="TOML file with parameter values")
    common.add_argument("--out", help="output directory (default: out/<command>)")
    common.add_argument("--quiet", action="store_true", help="no progress messages")

    parser = argparse.ArgumentParser(prog="semcorr", description=__doc__.splitlines()[0])
    parser.add_argument("--version", action="version", version=f"semcorr {__version__}")
    sub = parser.add_subparsers(dest="command", required=True)
    for name, (_, help_text) in COMMANDS.items():
        p = sub.add_parser(name, parents=[common], help=help_text)
        _add_params(p, PARAMS[name])
    return parser


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    log = (lambda msg: None) if args.quiet else (lambda msg: print(msg, file=sys.stderr))
    try:
        keys = {**GLOBAL, **PARAMS[args.command]}
        cfg = resolve_config(args.command, args.config, {k: getattr(args, k) for k in keys})
        out = Path(args.out) if args.out else Path("out") / args.command
        try:
            out.mkdir(parents=True, exist_ok=True)
        except OSError as e:
            raise OSError(f"cannot create output directory {out}: {e.strerror}") from None
        COMMANDS[args.command][0](cfg, out, log)
        cfg.write(out)
    except Exception as e:  # noqa: BLE001 -- one line per failure, whatever its type
        msg = " ".join(str(e).split()) or repr(e)
        print(f"error: {type(e).__name__}: {msg}", file=sys.stderr)
        return 1
    return 0


if __name__ == "__main__":  # pragma: no cover
    sys.exit(main())
