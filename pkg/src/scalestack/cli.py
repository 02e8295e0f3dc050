"""Command-line pipeline: synth, prepare, train, eval, visualize, pyramid.

Each command is an independent, deterministic step that reads and writes
files only. Errors surface as a single ``scalestack-error: <code>: <message>``
line on stderr and a nonzero exit status.
"""

from __future__ import annotations

import argparse
import hashlib
import json
import logging
import os
import sys
from concurrent.futures import ProcessPoolExecutor
from dataclasses import asdict, dataclass, field, fields
from pathlib import Path

import numpy as np

from . import dataset as D
from . import evaluation as E
from . import pyramid as P
from . import tensor as T
from .network import (PRESETS, DivergenceError, Network, ScaleData, TrainConfig,
                      build_network, predict_images, read_history, train, write_history)

log = logging.getLogger("scalestack")

CACHE_ENV = "SCALESTACK_CACHE"
ERROR_PREFIX = "scalestack-error"


class CliError(Exception):
    def __init__(self, code: str, message: str, status: int = 1):
        super().__init__(message)
        self.code = code
        self.status = status


@dataclass
class RunConfig:
    manifest: str = ""
    cache_dir: str = "cache"
    scales: tuple = (32, 64, 128, 256)
    kind: str = "gaussian"
    preset: str = "desk"
    out_dir: str = "run"
    seed: int = 0
    crop_size: int = 64
    precision: int = 32
    workers: int = 1
    skip_bad: bool = False
    train: TrainConfig = field(default_factory=TrainConfig)

    def __post_init__(self):
        self.scales = tuple(sorted(int(s) for s in self.scales))
        if not self.scales:
            raise ValueError("scale set is empty")
        for a, b in zip(self.scales, self.scales[1:]):
            if b != 2 * a:
                raise ValueError(f"scales must be powers of two apart: {list(self.scales)}")
        if self.kind not in ("gaussian", "naive"):
            raise ValueError(f"unknown pyramid kind {self.kind!r}")
        if self.preset not in PRESETS:
            raise ValueError(f"unknown preset {self.preset!r}; choose from {sorted(PRESETS)}")

    def to_dict(self) -> dict:
        d = asdict(self)
        d["scales"] = list(self.scales)
        return d

    @property
    def levels(self) -> int:
        return len(self.scales)

    @property
    def base(self) -> int:
        return self.scales[-1]


_TRAIN_FIELDS = {f.name: f.type for f in fields(TrainConfig)}
_RUN_FIELDS = {f.name for f in fields(RunConfig)} - {"train"}


def _coerce(key: str, value):
    if not isinstance(value, str):
        return value
    if key == "scales":
        return tuple(int(v) for v in value.replace(" ", "").split(",") if v)
    proto = TrainConfig() if key in _TRAIN_FIELDS else RunConfig()
    current = getattr(proto, key)
    if isinstance(current, bool):
        if value.lower() in ("1", "true", "yes", "on"):
            return True
        if value.lower() in ("0", "false", "no", "off"):
            return False
        raise ValueError(f"{key}: expected a boolean, got {value!r}")
    if isinstance(current, int):
        return int(value)
    if isinstance(current, float):
        return float(value)
    return value


def read_config_file(path) -> dict:
    """Parse ``key = value`` lines; ``#`` starts a comment."""
    out = {}
    for lineno, raw in enumerate(Path(path).read_text().splitlines(), start=1):
        line = raw.split("#", 1)[0].strip()
        if not line:
            continue
        if "=" not in line:
            raise ValueError(f"{path}:{lineno}: expected key = value")
        key, value = (part.strip() for part in line.split("=", 1))
        key = key.replace("-", "_")
        if key not in _RUN_FIELDS and key not in _TRAIN_FIELDS:
            raise ValueError(f"{path}:{lineno}: unknown key {key!r}")
        out[key] = value
    return out


def resolve_config(file_values: dict, flag_values: dict) -> RunConfig:
    """Defaults, then the config file, then command-line flags (flags win)."""
    merged = dict(file_values)
    merged.update({k: v for k, v in flag_values.items() if v is not None})
    if os.environ.get(CACHE_ENV):
        merged["cache_dir"] = os.environ[CACHE_ENV]
    run_kw, train_kw = {}, {}
    for key, value in merged.items():
        value = _coerce(key, value)
        if key == "seed":
            run_kw["seed"] = value
        elif key in _TRAIN_FIELDS:
            train_kw[key] = value
        elif key in _RUN_FIELDS:
            run_kw[key] = value
    train_kw["seed"] = int(run_kw.get("seed", 0))
    return RunConfig(**run_kw, train=TrainConfig(**train_kw))


def write_run_json(directory, command: str, config: dict) -> Path:
    directory = Path(directory)
    directory.mkdir(parents=True, exist_ok=True)
    path = directory / "run.json"
    path.write_text(json.dumps({"command": command, "config": config}, indent=2, sort_keys=True))
    return path


def _sha256(path) -> str:
    return hashlib.sha256(Path(path).read_bytes()).hexdigest()


# -- synth ----------------------------------------------------------------------

def cmd_synth(out_dir, spec: D.SynthSpec = D.SynthSpec(), split_seed: int | None = None) -> Path:
    """Generate the synthetic corpus with splits assigned; returns the manifest path."""
    out_dir = Path(out_dir)
    manifest = D.generate_synthetic_corpus(out_dir, spec)
    samples, names = D.load_manifest(manifest, check_images=False)
    seed = spec.seed if split_seed is None else split_seed
    samples = D.stratified_split(samples, D.SplitSpec(seed=seed))
    D.write_manifest(manifest, samples, names)
    provenance = {"synth": asdict(spec), "split_seed": seed, "manifest": manifest.name}
    (out_dir / "synth.json").write_text(json.dumps(provenance, indent=2, sort_keys=True))
    write_run_json(out_dir, "synth", provenance)
    return manifest


# -- prepare --------------------------------------------------------------------

def _prepare_one(job):
    src, stem, kind, scales, cache, entry = job
    try:
        source_hash = _sha256(src)
    except OSError as exc:
        return stem, None, f"{src}: {exc}"
    targets = {s: Path(cache) / str(s) / f"{stem}.png" for s in scales}
    if (entry and entry.get("source") == source_hash and entry.get("kind") == kind
            and all(t.exists() and entry["levels"].get(str(s)) == _sha256(t)
                    for s, t in targets.items())):
        return stem, entry, None
    try:
        img = P.read_png(src)
    except Exception as exc:  # PIL raises a variety of decode errors
        return stem, None, f"{src}: {exc}"
    if img.shape[2] == 1:
        img = np.repeat(img, 3, axis=2)
    if min(img.shape[:2]) < 2:
        return stem, None, f"{src}: image too small ({img.shape[0]}x{img.shape[1]})"
    pyr = P.build_pyramid(img, len(scales), max(scales), kind)
    levels = {}
    for s, t in targets.items():
        P.write_png(pyr.level(s), t)
        levels[str(s)] = _sha256(t)
    return stem, {"source": source_hash, "kind": kind, "levels": levels, "written": True}, None


def cmd_prepare(config: RunConfig) -> dict:
    """Cache every pyramid level as ``<cache>/<scale>/<stem>.png``.

    Entries whose source and level checksums match the cache index are left
    alone. Returns ``{"written": n, "skipped": n, "bad": [...]}``.
    """
    if not config.manifest:
        raise CliError("config", "no manifest given (--manifest)")
    P.scale_set(config.levels, config.base)  # validates the scale set
    try:
        samples, names = D.load_manifest(config.manifest, check_images=False)
    except D.ManifestError as exc:
        raise CliError("manifest", str(exc)) from exc
    stems: dict[str, Path] = {}
    for s in samples:
        if s.id in stems:
            raise CliError("manifest", f"duplicate image stem {s.id!r}: {stems[s.id]} and {s.image_path}")
        stems[s.id] = s.image_path
    if any(s.split is None for s in samples):
        samples = D.stratified_split(samples, D.SplitSpec(seed=config.seed))

    cache = Path(config.cache_dir)
    cache.mkdir(parents=True, exist_ok=True)
    index_path = cache / "cache.json"
    index = json.loads(index_path.read_text())["files"] if index_path.exists() else {}
    jobs = [(str(s.image_path), s.id, config.kind, config.scales, str(cache), index.get(s.id))
            for s in samples]
    if config.workers > 1:
        with ProcessPoolExecutor(config.workers) as pool:
            results = list(pool.map(_prepare_one, jobs, chunksize=8))
    else:
        results = [_prepare_one(j) for j in jobs]

    bad = [msg for _, _, msg in results if msg]
    if bad and not config.skip_bad:
        listing = "; ".join(bad)
        raise CliError("decode", f"{len(bad)} image(s) failed to decode: {listing} "
                                 "(rerun with --skip-bad to drop them)")
    written = skipped = 0
    files = {}
    for stem, entry, msg in results:
        if msg:
            continue
        if entry.pop("written", False):
            written += len(config.scales)
        else:
            skipped += len(config.scales)
        files[stem] = entry
    bad_stems = {stem for stem, _, msg in results if msg}
    kept = [s for s in samples if s.id not in bad_stems]
    D.write_manifest(cache / "manifest.csv", kept, names)
    index_path.write_text(json.dumps({"kind": config.kind, "scales": list(config.scales),
                                      "files": files}, indent=1, sort_keys=True))
    write_run_json(cache, "prepare", config.to_dict())
    return {"written": written, "skipped": skipped, "bad": bad}


# -- train ----------------------------------------------------------------------

def _cached_split(config: RunConfig, scale: int):
    cache = Path(config.cache_dir)
    manifest = cache / "manifest.csv"
    level_dir = cache / str(scale)
    if not manifest.exists() or not level_dir.is_dir():
        raise CliError("missing-cache", f"no cached pyramid for scale {scale} in {cache}; "
                                        "run `scalestack prepare` first")
    samples, names = D.load_manifest(manifest, check_images=False)
    out = {split: ([], [], []) for split in D.SPLITS}
    for s in samples:
        path = level_dir / f"{s.id}.png"
        if not path.exists():
            raise CliError("missing-cache", f"{path} is missing; run `scalestack prepare` first")
        imgs, labels, ids = out[s.split]
        imgs.append(P.read_png(path))
        labels.append(s.label)
        ids.append(s.id)
    return out, names


def scale_dir(config: RunConfig, scale: int) -> Path:
    return Path(config.out_dir) / f"scale-{scale}"


def cmd_train(config: RunConfig, scale: int) -> Path:
    """Train the network for one scale; returns the checkpoint path."""
    if scale not in config.scales:
        raise CliError("config", f"scale {scale} is not in the scale set {list(config.scales)}")
    T.set_precision(config.precision)
    splits, names = _cached_split(config, scale)
    (tr_x, tr_y, _), (va_x, va_y, _) = splits["train"], splits["val"]
    data = ScaleData(tr_x, np.array(tr_y), va_x, np.array(va_y), {"scale": scale})
    net_config = PRESETS[config.preset](len(names), config.crop_size)
    net = build_network(net_config, np.random.default_rng([config.seed, scale]))
    train_cfg = TrainConfig(**{**asdict(config.train), "seed": config.train.seed * 1000 + scale})
    out = scale_dir(config, scale)
    out.mkdir(parents=True, exist_ok=True)
    history = []
    try:
        net, history = train(net, data, train_cfg, on_epoch=lambda n, rec: history.append(rec))
    except DivergenceError as exc:
        write_history(history, out / "train_log.csv")
        last = history[-1].epoch if history else 0
        raise CliError("divergence", f"scale {scale}: {exc}; last good epoch {last}") from exc
    ckpt = out / "model.sstk"
    net.save(ckpt)
    write_history(history, out / "train_log.csv")
    D.write_normalization(out / "normalization.json", net.mean, net.std)
    write_run_json(out, "train", {**config.to_dict(), "scale": scale})
    return ckpt


# -- eval -----------------------------------------------------------------------

def collect_predictions(config: RunConfig):
    """Test-split prediction records with one posterior per configured scale."""
    T.set_precision(config.precision)
    records: dict[str, E.PredictionRecord] = {}
    names = None
    for scale in config.scales:
        ckpt = scale_dir(config, scale) / "model.sstk"
        if not ckpt.exists():
            raise CliError("missing-checkpoint", f"no checkpoint for scale {scale}: {ckpt}; "
                                                 f"run `scalestack train --scale {scale}`")
        net = Network.load(ckpt)
        splits, names = _cached_split(config, scale)
        imgs, labels, ids = splits["test"]
        if not imgs:
            raise CliError("data", "test split is empty")
        post = predict_images(net, imgs)
        for i, lab, p in zip(ids, labels, post):
            records.setdefault(i, E.PredictionRecord(i, lab, {})).posteriors[scale] = p
    return list(records.values()), names


def cmd_eval(config: RunConfig) -> dict:
    """Write subset metrics, correlations, variation ranking, predictions and figures."""
    from . import figures

    records, names = collect_predictions(config)
    scales = list(config.scales)
    out = Path(config.out_dir) / "report"
    out.mkdir(parents=True, exist_ok=True)

    reports = E.evaluate_all_subsets(records, scales)
    E.write_subset_csv(reports, scales, out / "subsets.csv")
    (out / "subsets.txt").write_text(E.subset_table_text(reports, scales))
    E.write_records(records, scales, out / "posteriors.csv")
    E.export_prediction_vectors(records, scales, out / "predictions.csv")
    figures.plot_subsets(reports, out / "subsets.png")

    ca = E.per_scale_class_accuracy(records, scales)
    summary = {
        "scales": scales,
        "classes": names,
        "num_test_images": len(records),
        "single_scale_mca": {str(r.scales[0]): round(r.mca, 6) for r in reports if len(r.scales) == 1},
        "ensemble_mca": round(reports[-1].mca, 6),
        "ensemble_mean_recall": round(reports[-1].mean_recall, 6),
        "ensemble_f_score": round(reports[-1].f_score, 6),
        "class_accuracy": {str(s): [round(v, 6) for v in ca[:, j]] for j, s in enumerate(scales)},
    }
    if len(scales) > 1:
        corr = E.correlation_matrix(ca)
        E.write_correlation_csv(corr, scales, out / "correlation.csv")
        (out / "correlation.txt").write_text(E.correlation_text(corr, scales))
        adjacent, extreme = E.adjacent_vs_extreme(corr)
        top_n = max(1, min(5, len(names) // 2))
        least, most = E.scale_variation_ranking(records, scales, top_n)
        (out / "variation.txt").write_text(E.variation_text(least, most, scales, names))
        figures.plot_correlation(corr, scales, out / "correlation.png")
        figures.plot_class_accuracy(ca, scales, names, out / "class_accuracy.png")
        summary.update({
            "adjacent_correlation": _json_float(adjacent),
            "extreme_correlation": _json_float(extreme),
            "mean_off_diagonal_correlation": _json_float(E.mean_off_diagonal(corr)),
            "least_varying": [r.label for r in least],
            "most_varying": [r.label for r in most],
        })
    histories = {}
    for s in scales:
        log_path = scale_dir(config, s) / "train_log.csv"
        if log_path.exists():
            histories[s] = read_history(log_path)
    if histories:
        figures.plot_training_curves(histories, out / "training_curves.png")
    (out / "summary.json").write_text(json.dumps(summary, indent=2, sort_keys=True))
    write_run_json(out, "eval", config.to_dict())
    return summary


def _json_float(v: float):
    return None if np.isnan(v) else round(float(v), 6)


# Settings used for the synthetic desk runs: a gentler start than the full-size
# default and a longer plateau window, since the validation split is tiny.
DESK_TRAIN = {"learning_rate": 3e-3, "plateau_patience": 5, "max_epochs": 40}


def run_pipeline(config: RunConfig) -> dict:
    """prepare, train every scale, eval; returns the eval summary."""
    cmd_prepare(config)
    for scale in config.scales:
        cmd_train(config, scale)
    return cmd_eval(config)


# -- visualize / pyramid --------------------------------------------------------

def cmd_visualize(checkpoint, image, target, out) -> Path:
    from .saliency import guided_backprop, render_saliency

    T.set_precision(64)
    net = Network.load(checkpoint)
    classes = _class_names(checkpoint)
    if isinstance(target, str) and not target.lstrip("-").isdigit():
        if classes is None or target not in classes:
            raise CliError("class", f"unknown class {target!r}; known: {classes}")
        target = classes.index(target)
    target = int(target)
    if not 0 <= target < net.num_classes:
        raise CliError("class", f"class index {target} outside [0, {net.num_classes})")
    img = P.read_png(image)
    if img.shape[2] == 1:
        img = np.repeat(img, 3, axis=2)
    smap = guided_backprop(net, img, target)
    out = Path(out)
    render_saliency(smap, out)
    write_run_json(out.parent, "visualize", {"checkpoint": str(checkpoint), "image": str(image),
                                             "class": target, "out": str(out)})
    return out


def _class_names(checkpoint):
    # run dir layout: <out>/scale-S/model.sstk with the resolved config in run.json
    run = Path(checkpoint).parent / "run.json"
    if not run.exists():
        return None
    cfg = json.loads(run.read_text())["config"]
    manifest = Path(cfg["cache_dir"]) / "manifest.csv"
    if not manifest.exists():
        return None
    return D.load_manifest(manifest, check_images=False)[1]


def cmd_pyramid(image, levels: int, base: int, kind: str, out_dir) -> list[Path]:
    img = P.read_png(image)
    pyr = P.build_pyramid(img, levels, base, kind)
    out_dir = Path(out_dir)
    paths = []
    for level in pyr.levels:
        path = out_dir / f"{Path(image).stem}_{kind}_{min(level.shape[:2])}.png"
        P.write_png(level, path)
        paths.append(path)
    write_run_json(out_dir, "pyramid", {"input": str(image), "levels": levels, "base": base,
                                        "kind": kind})
    return paths


# -- argument parsing -----------------------------------------------------------

def _add_run_options(p: argparse.ArgumentParser) -> None:
    p.add_argument("--config", help="plain-text key = value file; flags override it")
    p.add_argument("--manifest")
    p.add_argument("--cache", dest="cache_dir", help=f"cache directory (env {CACHE_ENV} overrides)")
    p.add_argument("--scales", help="comma-separated, e.g. 32,64,128,256")
    p.add_argument("--kind", choices=("gaussian", "naive"))
    p.add_argument("--preset", choices=sorted(PRESETS))
    p.add_argument("--out", dest="out_dir")
    p.add_argument("--seed", type=int)
    p.add_argument("--crop-size", type=int)
    p.add_argument("--precision", type=int, choices=(32, 64))
    p.add_argument("--workers", type=int)
    p.add_argument("--skip-bad", action="store_const", const=True)
    p.add_argument("--learning-rate", type=float)
    p.add_argument("--momentum", type=float)
    p.add_argument("--weight-decay", type=float)
    p.add_argument("--batch-size", type=int)
    p.add_argument("--max-epochs", type=int)
    p.add_argument("--plateau-patience", type=int)
    p.add_argument("--min-lr", type=float)
    p.add_argument("--augment-flip", action="store_const", const=True)


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="scalestack", description=__doc__.splitlines()[0])
    parser.add_argument("-v", "--verbose", action="store_true")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("synth", help="generate the synthetic corpus")
    p.add_argument("--out", required=True)
    for f in fields(D.SynthSpec):
        p.add_argument("--" + f.name.replace("_", "-"), type=type(f.default), default=f.default)

    for name, text in (("prepare", "build and cache pyramids"), ("eval", "evaluate all scale subsets")):
        _add_run_options(sub.add_parser(name, help=text))
    p = sub.add_parser("train", help="train one scale-specific network")
    _add_run_options(p)
    p.add_argument("--scale", type=int, required=True)

    p = sub.add_parser("visualize", help="guided-backprop saliency map")
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--image", required=True)
    p.add_argument("--class", dest="target", required=True, help="class name or index")
    p.add_argument("--out", required=True)

    p = sub.add_parser("pyramid", help="write the pyramid levels of one image")
    p.add_argument("--input", required=True)
    p.add_argument("--levels", type=int, default=4)
    p.add_argument("--base", type=int, default=256)
    p.add_argument("--kind", choices=("gaussian", "naive"), default="gaussian")
    p.add_argument("--out", required=True)
    return parser


_NON_RUN = {"config", "command", "verbose", "scale"}


def _run_config(args) -> RunConfig:
    file_values = read_config_file(args.config) if args.config else {}
    flags = {k: v for k, v in vars(args).items() if k not in _NON_RUN}
    return resolve_config(file_values, flags)


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(message)s")
    try:
        if args.command == "synth":
            spec = D.SynthSpec(**{f.name: getattr(args, f.name) for f in fields(D.SynthSpec)})
            print(cmd_synth(args.out, spec))
        elif args.command == "prepare":
            res = cmd_prepare(_run_config(args))
            print(f"written={res['written']} skipped={res['skipped']} bad={len(res['bad'])}")
        elif args.command == "train":
            print(cmd_train(_run_config(args), args.scale))
        elif args.command == "eval":
            cfg = _run_config(args)
            summary = cmd_eval(cfg)
            print(f"ensemble_mca={summary['ensemble_mca']:.2f} report={Path(cfg.out_dir) / 'report'}")
        elif args.command == "visualize":
            print(cmd_visualize(args.checkpoint, args.image, args.target, args.out))
        elif args.command == "pyramid":
            for path in cmd_pyramid(args.input, args.levels, args.base, args.kind, args.out):
                print(path)
    except CliError as exc:
        _fail(exc.code, str(exc))
        return exc.status
    except D.ManifestError as exc:
        _fail("manifest", str(exc))
        return 1
    except (ValueError, KeyError, OSError) as exc:
        _fail("invalid", str(exc))
        return 1
    return 0


def _fail(code: str, message: str) -> None:
    line = " ".join(message.split())
    print(f"{ERROR_PREFIX}: {code}: {line}", file=sys.stderr)


if __name__ == "__main__":
    sys.exit(main())
