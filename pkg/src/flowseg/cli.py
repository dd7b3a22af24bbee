"""Command-line operator surface.

Subcommands cover the whole workflow: synthetic dataset generation,
training, cross-domain evaluation, the five-version ablation sweep,
posterior sampling with uncertainty maps, and file inspection.

Configuration is plain ``key = value`` text with ``#`` comments; flags
override file values, and the effective configuration is echoed into the
run directory.  Exit codes: 0 success, 2 usage/config, 3 I/O, 4 numerical
failure.
"""

import argparse
import csv
import io
import os
import sys
from concurrent.futures import ThreadPoolExecutor
from dataclasses import fields, replace
from pathlib import Path

import numpy as np

from .data import (DOMAINS, DomainConfig, FormatError, dataset_load,
                   dataset_meta, dataset_save, gen_dataset, pgm_write)
from .diffcore import NonFiniteError
from .ncvi import Hyperpriors
from .pipeline import (Model, ModelConfig, VERSION_TOGGLES, checkpoint_load,
                       config_for_version, evaluate, fit, forward)


class ConfigError(ValueError):
    """Bad usage or configuration; maps to exit code 2."""


# -- configuration ---------------------------------------------------------------

_MODEL_KEYS = {f.name: f.type for f in fields(ModelConfig)}
_HP_KEYS = {f"hp.{f.name}" for f in fields(Hyperpriors)}
_EXTRA_KEYS = {"domain", "n", "val_frac", "run"}
_ALLOWED_KEYS = set(_MODEL_KEYS) | _HP_KEYS | _EXTRA_KEYS

_DEFAULT_EXTRAS = {"domain": "A", "n": 200, "val_frac": 0.2, "run": "run"}


def _parse_value(key: str, raw: str):
    raw = raw.strip()
    try:
        if key == "image_size":
            h, _, w = raw.partition("x")
            return (int(h), int(w))
        if key in ("domain", "run"):
            return raw
        if key in _HP_KEYS or key in ("sde_horizon", "tau", "lambda_bayes",
                                      "learning_rate", "weight_decay",
                                      "early_stop_dice", "val_frac"):
            return float(raw)
        if key in ("nf_posterior", "ncvi", "sde_girsanov", "augment"):
            if raw not in ("true", "false"):
                raise ValueError(f"expected true/false, got {raw!r}")
            return raw == "true"
        return int(raw)
    except ValueError as exc:
        raise ConfigError(f"bad value for {key!r}: {exc}") from exc


def _format_value(value) -> str:
    if isinstance(value, bool):
        return "true" if value else "false"
    if isinstance(value, tuple):
        return f"{value[0]}x{value[1]}"
    if isinstance(value, float):
        return repr(value)
    return str(value)


def default_config() -> dict:
    cfg = {f.name: getattr(ModelConfig(), f.name) for f in fields(ModelConfig)}
    hp = Hyperpriors()
    cfg.update({f"hp.{f.name}": getattr(hp, f.name) for f in fields(Hyperpriors)})
    cfg.update(_DEFAULT_EXTRAS)
    return cfg


def read_config_file(path: str | Path) -> dict:
    """Parse ``key = value`` lines; unknown keys name the offending line."""
    out = {}
    text = Path(path).read_text()
    for lineno, line in enumerate(text.splitlines(), start=1):
        stripped = line.split("#", 1)[0].strip()
        if not stripped:
            continue
        key, eq, raw = stripped.partition("=")
        key = key.strip()
        if not eq or not key:
            raise ConfigError(
                f"{path}:{lineno}: expected 'key = value', got {line.rstrip()!r}")
        if key not in _ALLOWED_KEYS:
            raise ConfigError(f"{path}:{lineno}: unknown key {key!r}")
        out[key] = _parse_value(key, raw)
    return out


def effective_config(args) -> tuple[dict, set]:
    """Defaults, then the config file, then flag overrides.

    Returns (config, explicitly-set keys).
    """
    cfg = default_config()
    explicit: set[str] = set()
    if getattr(args, "config", None):
        path = Path(args.config)
        if not path.exists():
            raise FileNotFoundError(f"config file not found: {path}")
        file_vals = read_config_file(path)
        cfg.update(file_vals)
        explicit |= set(file_vals)
    for setting in getattr(args, "set", None) or []:
        key, eq, raw = setting.partition("=")
        key = key.strip()
        if not eq or key not in _ALLOWED_KEYS:
            raise ConfigError(f"--set: unknown or malformed setting {setting!r}")
        cfg[key] = _parse_value(key, raw)
        explicit.add(key)
    if getattr(args, "seed", None) is not None:
        cfg["seed"] = args.seed
        explicit.add("seed")
    return cfg, explicit


def model_config_from(cfg: dict) -> ModelConfig:
    kwargs = {name: cfg[name] for name in _MODEL_KEYS}
    try:
        return ModelConfig(**kwargs)
    except ValueError as exc:
        raise ConfigError(str(exc)) from exc


def hyperpriors_from(cfg: dict) -> Hyperpriors:
    return Hyperpriors(**{key[3:]: cfg[key] for key in _HP_KEYS})


def write_config_echo(cfg: dict, path: Path) -> None:
    lines = [f"{key} = {_format_value(cfg[key])}" for key in sorted(cfg)]
    path.write_text("\n".join(lines) + "\n")


def _write_csv(path: Path, header: list[str], rows: list[list]) -> None:
    buf = io.StringIO()
    writer = csv.writer(buf, lineterminator="\n")
    writer.writerow(header)
    for row in rows:
        writer.writerow([f"{v:.10g}" if isinstance(v, float) else v
                         for v in row])
    path.write_text(buf.getvalue())


def _worker_count(n_tasks: int) -> int:
    raw = os.environ.get("DBF_THREADS", "1")
    try:
        cap = int(raw)
    except ValueError as exc:
        raise ConfigError(f"DBF_THREADS must be an integer, got {raw!r}") from exc
    if cap < 1:
        raise ConfigError(f"DBF_THREADS must be >= 1, got {cap}")
    return max(1, min(n_tasks, cap))


def _load_dataset(path: str | Path):
    p = Path(path)
    if not p.exists():
        raise FileNotFoundError(f"dataset not found: {p}")
    return dataset_load(p)


def _split_train_val(samples, val_frac: float):
    if not 0.0 < val_frac < 1.0:
        raise ConfigError(f"val_frac must be in (0, 1), got {val_frac}")
    n_val = max(1, int(round(len(samples) * val_frac)))
    if n_val >= len(samples):
        raise ConfigError(
            f"cannot hold out {n_val} of {len(samples)} samples for validation")
    return samples[:-n_val], samples[-n_val:]


def _resolve_data_config(cfg: dict, explicit: set, meta: tuple) -> dict:
    """Fold dataset geometry into the config, rejecting contradictions."""
    _, h, w, k = meta
    out = dict(cfg)
    if "num_classes" in explicit and cfg["num_classes"] != k:
        raise ConfigError(
            f"config num_classes={cfg['num_classes']} but dataset has {k} classes")
    if "image_size" in explicit and tuple(cfg["image_size"]) != (h, w):
        raise ConfigError(
            f"config image_size={cfg['image_size']} but dataset is {(h, w)}")
    out["num_classes"] = k
    out["image_size"] = (h, w)
    return out


# -- subcommands ----------------------------------------------------------------


def cmd_gen_data(args) -> int:
    cfg, explicit = effective_config(args)
    if args.domain is not None:
        cfg["domain"] = args.domain
        explicit.add("domain")
    if args.n is not None:
        cfg["n"] = args.n
    if cfg["n"] <= 0:
        raise ConfigError(f"--n must be positive, got {cfg['n']}")
    name = cfg["domain"]
    if name not in DOMAINS:
        raise ConfigError(
            f"unknown domain {name!r}; available: {', '.join(sorted(DOMAINS))}")
    domain = DOMAINS[name]
    overrides = {}
    for field in ("noise_sigma", "bias_amplitude", "contrast_gamma"):
        value = getattr(args, field)
        if value is not None:
            overrides[field] = value
    if "seed" in explicit:
        overrides["seed"] = cfg["seed"]
    if overrides:
        domain = replace(domain, **overrides)
    samples = gen_dataset(domain, cfg["n"], image_size=tuple(cfg["image_size"]))
    out = Path(args.out)
    if out.parent and not out.parent.exists():
        out.parent.mkdir(parents=True, exist_ok=True)
    dataset_save(samples, out, num_classes=cfg["num_classes"])
    h, w = cfg["image_size"]
    print(f"wrote {out}: {cfg['n']} samples, {h}x{w}, "
          f"{cfg['num_classes']} classes, domain {domain.name} "
          f"(noise {domain.noise_sigma}, bias {domain.bias_amplitude}, "
          f"gamma {domain.contrast_gamma})")
    return 0


def _train_common(args, cfg: dict, explicit: set):
    """Shared train/ablate setup: datasets, geometry fold-in, run dir."""
    train_samples = _load_dataset(args.data)
    meta = dataset_meta(args.data)
    cfg = _resolve_data_config(cfg, explicit, meta)
    if args.val:
        val_samples = _load_dataset(args.val)
        val_meta = dataset_meta(args.val)
        if val_meta[1:] != meta[1:]:
            raise ConfigError(
                f"validation geometry {val_meta[1:]} != train geometry {meta[1:]}")
    else:
        train_samples, val_samples = _split_train_val(
            train_samples, cfg["val_frac"])
    return cfg, train_samples, val_samples


_METRIC_COLUMNS = ["epoch", "loss", "dice_val", "kl_y", "kl_z", "kl_x", "kl_m"]


def cmd_train(args) -> int:
    cfg, explicit = effective_config(args)
    cfg, train_samples, val_samples = _train_common(args, cfg, explicit)
    run_dir = Path(args.out) / cfg["run"]
    run_dir.mkdir(parents=True, exist_ok=True)
    write_config_echo(cfg, run_dir / "config.echo")
    model_cfg = model_config_from(cfg)
    hp = hyperpriors_from(cfg)

    def report(row):
        print(f"epoch {row['epoch']}: loss {row['loss']:.4f} "
              f"dice {row['dice_val']:.4f}", flush=True)

    model, history = fit(train_samples, val_samples, model_cfg,
                         out_dir=run_dir, resume=args.resume, hp=hp,
                         progress=report)
    _write_csv(run_dir / "metrics.csv", _METRIC_COLUMNS,
               [[row[c] for c in _METRIC_COLUMNS] for row in history])
    best = max((row["dice_val"] for row in history), default=float("nan"))
    print(f"best validation dice {best:.4f}; artifacts in {run_dir}")
    return 0


def _eval_datasets(model: Model, paths: list[str]) -> list[float]:
    """Mean Dice per dataset, fanned out over DBF_THREADS workers."""
    loaded = []
    for path in paths:
        meta = dataset_meta(path)
        if meta[3] != model.cfg.num_classes:
            raise ConfigError(
                f"{path}: dataset has {meta[3]} classes but checkpoint "
                f"expects {model.cfg.num_classes}")
        if meta[1:3] != tuple(model.cfg.image_size):
            raise ConfigError(
                f"{path}: dataset is {meta[1:3]} but checkpoint expects "
                f"{tuple(model.cfg.image_size)}")
        loaded.append(_load_dataset(path))
    workers = _worker_count(len(loaded))
    if workers == 1:
        return [evaluate(samples, model) for samples in loaded]
    with ThreadPoolExecutor(max_workers=workers) as pool:
        return list(pool.map(lambda s: evaluate(s, model), loaded))


def cmd_eval(args) -> int:
    model, _, _ = checkpoint_load(args.ckpt)
    paths = ([args.source] if args.source else []) + list(args.data)
    if not args.data:
        raise ConfigError("eval needs at least one target dataset")
    dices = _eval_datasets(model, paths)
    rows: list[list] = []
    offset = 0
    if args.source:
        rows.append([Path(args.source).stem, dices[0]])
        offset = 1
    target_dices = dices[offset:]
    for path, dice in zip(args.data, target_dices):
        rows.append([Path(path).stem, dice])
    rows.append(["avg_targets", float(np.mean(target_dices))])
    for name, dice in rows:
        print(f"{name}: {dice:.4f}")
    _write_csv(Path(args.out), ["dataset", "dice"], rows)
    return 0


def cmd_ablate(args) -> int:
    cfg, explicit = effective_config(args)
    cfg, train_samples, val_samples = _train_common(args, cfg, explicit)
    run_dir = Path(args.out)
    run_dir.mkdir(parents=True, exist_ok=True)
    write_config_echo(cfg, run_dir / "config.echo")
    base_cfg = model_config_from(cfg)
    hp = hyperpriors_from(cfg)

    target_paths = list(args.targets or [])
    if not target_paths:
        raise ConfigError("ablate needs at least one target dataset")
    # The source column is measured on the full source file so the row is
    # reproducible by a standalone train + eval with the same seed.
    eval_sets = [(Path(args.data).stem, _load_dataset(args.data))]
    for path in target_paths:
        meta = dataset_meta(path)
        if meta[1:] != (base_cfg.image_size[0], base_cfg.image_size[1],
                        base_cfg.num_classes):
            raise ConfigError(
                f"{path}: geometry {meta[1:]} does not match source")
        eval_sets.append((Path(path).stem, _load_dataset(path)))

    header = (["version", "nf_posterior", "ncvi", "sde_girsanov"]
              + [name for name, _ in eval_sets] + ["avg_targets"])
    rows: list[list] = []
    summary: dict[str, float] = {}
    for version in sorted(VERSION_TOGGLES):
        ver_cfg = config_for_version(base_cfg, version)
        model, _ = fit(train_samples, val_samples, ver_cfg, hp=hp)
        workers = _worker_count(len(eval_sets))
        if workers == 1:
            dices = [evaluate(s, model) for _, s in eval_sets]
        else:
            with ThreadPoolExecutor(max_workers=workers) as pool:
                dices = list(pool.map(lambda kv: evaluate(kv[1], model),
                                      eval_sets))
        avg_targets = float(np.mean(dices[1:]))
        nf, ncvi, sde = VERSION_TOGGLES[version]
        rows.append([version, nf, ncvi, sde] + dices + [avg_targets])
        summary[version] = avg_targets
        marks = ["✓" if t else "×" for t in (nf, ncvi, sde)]
        cells = "  ".join(f"{d:.4f}" for d in dices)
        print(f"{version}  {marks[0]}  {marks[1]}  {marks[2]}  {cells}  "
              f"{avg_targets:.4f}", flush=True)

    _write_csv(run_dir / "ablate.csv", header,
               [[_format_value(v) if isinstance(v, bool) else v for v in row]
                for row in rows])
    delta = summary["ver5"] - summary["ver1"]
    print(f"ver5 - ver1 target average: {delta:+.4f} (reported, not gated)")
    return 0


def cmd_sample_posterior(args) -> int:
    model, _, _ = checkpoint_load(args.ckpt)
    samples = _load_dataset(args.data)
    if not 0 <= args.index < len(samples):
        raise ConfigError(
            f"--index {args.index} out of range for {len(samples)} samples")
    if args.m <= 0:
        raise ConfigError(f"--m must be positive, got {args.m}")
    out_dir = Path(args.out)
    out_dir.mkdir(parents=True, exist_ok=True)
    image = samples[args.index].image[None, None, :, :]
    seed = args.seed if args.seed is not None else model.cfg.seed
    rng = np.random.default_rng(seed)

    k = model.cfg.num_classes
    labels = []
    log_weights = []
    for i in range(args.m):
        out = forward(image, model, "train", rng)
        labels.append(out.y_hat.data[0].argmax(axis=0))
        log_weights.append(out.log_rn_weights[0])
        pgm_write(labels[-1], out_dir / f"sample_{i:02d}.pgm")

    stack = np.stack(labels)
    freq = np.stack([(stack == c).mean(axis=0) for c in range(k)])
    with np.errstate(divide="ignore", invalid="ignore"):
        entropy = -np.where(freq > 0, freq * np.log(freq), 0.0).sum(axis=0)
    pgm_write(entropy, out_dir / "entropy.pgm")
    _write_csv(out_dir / "log_weights.csv", ["sample", "log_weight"],
               [[i, w] for i, w in enumerate(log_weights)])

    mean_rn = float(np.mean(np.exp(log_weights)))
    band = "within" if 0.2 <= mean_rn <= 5.0 else "OUTSIDE"
    print(f"wrote {args.m} samples + entropy map to {out_dir}")
    print(f"mean exp(log_weight) = {mean_rn:.4f} ({band} sanity band [0.2, 5])")
    return 0


def cmd_inspect(args) -> int:
    path = Path(args.path)
    if not path.exists():
        raise FileNotFoundError(f"no such file: {path}")
    magic = path.read_bytes()[:4]
    if magic == b"DBFD":
        n, h, w, k = dataset_meta(path)
        dataset_load(path)  # full checksum validation
        print(f"kind: dataset\nsamples: {n}\nheight: {h}\nwidth: {w}\n"
              f"classes: {k}\nbytes: {path.stat().st_size}\nchecksum: ok")
        return 0
    if magic == b"DBFC":
        model, opt_state, epoch = checkpoint_load(path)
        named = model.named_params()
        print("kind: checkpoint")
        print(f"epoch: {epoch}")
        print(f"tensors: {len(named)}")
        print(f"parameters: {sum(p.data.size for _, p in named)}")
        print(f"optimizer_state: {'yes' if opt_state is not None else 'no'}")
        for key in ("num_classes", "image_size", "nf_posterior", "ncvi",
                    "sde_girsanov", "channels", "seed"):
            print(f"{key}: {_format_value(getattr(model.cfg, key))}")
        return 0
    raise FormatError(
        f"unrecognized magic {magic!r}; expected DBFD (dataset) or "
        f"DBFC (checkpoint)")


# -- parser ------------------------------------------------------------------------


def _add_common(sub: argparse.ArgumentParser) -> None:
    sub.add_argument("--config", help="key = value config file")
    sub.add_argument("--seed", type=int, help="override the config seed")
    sub.add_argument("--set", action="append", metavar="KEY=VALUE",
                     help="override any config key (repeatable)")


def _build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="flowseg",
        description="Flow-posterior Bayesian segmentation workbench")
    subs = parser.add_subparsers(dest="command", required=True)

    g = subs.add_parser("gen-data", help="generate a synthetic dataset file")
    _add_common(g)
    g.add_argument("--domain", choices=sorted(DOMAINS))
    g.add_argument("--n", type=int, help="number of samples")
    g.add_argument("--noise-sigma", dest="noise_sigma", type=float)
    g.add_argument("--bias-amplitude", dest="bias_amplitude", type=float)
    g.add_argument("--contrast-gamma", dest="contrast_gamma", type=float)
    g.add_argument("--out", required=True, help="output .dbfd path")
    g.set_defaults(func=cmd_gen_data)

    t = subs.add_parser("train", help="fit the pipeline on a dataset")
    _add_common(t)
    t.add_argument("--data", required=True, help="training .dbfd file")
    t.add_argument("--val", help="validation .dbfd file (default: held-out split)")
    t.add_argument("--resume", help="checkpoint to continue from")
    t.add_argument("--out", default="out", help="parent of the run directory")
    t.set_defaults(func=cmd_train)

    e = subs.add_parser("eval", help="evaluate a checkpoint on datasets")
    _add_common(e)
    e.add_argument("--ckpt", required=True)
    e.add_argument("--source", help="source-domain dataset (reported, "
                                    "excluded from the target average)")
    e.add_argument("--out", default="eval.csv", help="output CSV path")
    e.add_argument("data", nargs="*", help="target dataset files")
    e.set_defaults(func=cmd_eval)

    a = subs.add_parser("ablate", help="train and compare ver1..ver5")
    _add_common(a)
    a.add_argument("--data", required=True, help="source-domain training file")
    a.add_argument("--val", help="validation .dbfd file (default: held-out split)")
    a.add_argument("--targets", nargs="*", help="target-domain dataset files")
    a.add_argument("--out", default="out/ablate", help="output directory")
    a.set_defaults(func=cmd_ablate)

    s = subs.add_parser("sample-posterior",
                        help="draw posterior segmentation samples")
    _add_common(s)
    s.add_argument("--ckpt", required=True)
    s.add_argument("--data", required=True, help=".dbfd file to sample from")
    s.add_argument("--index", type=int, default=0, help="image index")
    s.add_argument("--m", type=int, default=8, help="number of samples")
    s.add_argument("--out", default="out/posterior", help="output directory")
    s.set_defaults(func=cmd_sample_posterior)

    i = subs.add_parser("inspect", help="describe a .dbfd or .dbfc file")
    i.add_argument("path")
    i.set_defaults(func=cmd_inspect)

    return parser


def main(argv=None) -> int:
    try:
        args = _build_parser().parse_args(argv)
    except SystemExit as exc:
        return int(exc.code or 0)
    try:
        return args.func(args)
    except FormatError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 3
    except ValueError as exc:
        # ConfigError and any bad-parameter complaint from the library.
        print(f"error: {exc}", file=sys.stderr)
        return 2
    except OSError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 3
    except NonFiniteError as exc:
        print(f"numerical failure: {exc}", file=sys.stderr)
        return 4


if __name__ == "__main__":
    sys.exit(main())
