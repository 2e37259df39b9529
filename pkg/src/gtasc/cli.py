"""Command-line entry point: synth, extract, stats, train, eval, predict, export, size.

Exit codes: 0 success, 1 data error, 2 usage or configuration error.
"""

from __future__ import annotations

import argparse
import logging
import sys
from dataclasses import dataclass, field, fields
from pathlib import Path

import numpy as np

from . import data, dsp, modelio, nn, train

log = logging.getLogger("gtasc")

EXIT_OK, EXIT_DATA, EXIT_USAGE = 0, 1, 2
DATA_ERRORS = (data.MetadataError, data.WavFormatError, dsp.InputError, dsp.CacheFormatError,
               modelio.FormatError, nn.ShapeError, OSError)


class UsageError(Exception):
    pass


@dataclass
class RunConfig:
    """Merged view of front-end, training and path settings; every field has a default."""
    frontend: dsp.FrontendConfig = field(default_factory=dsp.FrontendConfig)
    training: train.TrainConfig = field(default_factory=train.TrainConfig)
    audio_root: str | None = None
    cache: str | None = None
    model: str | None = None
    seed: int = 0

    @classmethod
    def from_args(cls, ns: argparse.Namespace) -> "RunConfig":
        def pick(dc):
            return {f.name: getattr(ns, f.name) for f in fields(dc)
                    if getattr(ns, f.name, None) is not None}
        fe = pick(dsp.FrontendConfig)
        tr = pick(train.TrainConfig)
        if getattr(ns, "lr", None) is not None:
            tr["initial_lr"] = ns.lr
        try:
            return cls(dsp.FrontendConfig(**fe), train.TrainConfig(**tr),
                       getattr(ns, "audio_root", None), getattr(ns, "cache", None),
                       getattr(ns, "model", None), getattr(ns, "seed", 0) or 0)
        except (dsp.ConfigError, ValueError) as exc:
            raise UsageError(str(exc)) from None


# -- config file ------------------------------------------------------------------

def read_config_file(path) -> dict[str, str]:
    """``key = value`` lines; ``#`` starts a comment; keys mirror long flag names."""
    out = {}
    try:
        text = Path(path).read_text()
    except OSError as exc:
        raise UsageError(f"cannot read config {path}: {exc}") from None
    for lineno, raw in enumerate(text.splitlines(), start=1):
        line = raw.split("#", 1)[0].strip()
        if not line:
            continue
        if "=" not in line:
            raise UsageError(f"{path}:{lineno}: expected 'key = value'")
        k, v = (s.strip() for s in line.split("=", 1))
        out[k.lstrip("-").replace("-", "_")] = v
    return out


_TRUE = {"1", "true", "yes", "on"}
_FALSE = {"0", "false", "no", "off"}


def _apply_config(sub: argparse.ArgumentParser, values: dict[str, str]):
    actions = {a.dest: a for a in sub._actions if a.dest not in ("help", "config")}
    defaults = {}
    for key, raw in values.items():
        act = actions.get(key)
        if act is None:
            raise UsageError(f"config key {key!r} is not an option of '{sub.prog}'")
        if act.nargs == 0 or isinstance(act, argparse.BooleanOptionalAction):
            low = raw.lower()
            if low not in _TRUE | _FALSE:
                raise UsageError(f"config key {key!r}: expected a boolean, got {raw!r}")
            val = low in _TRUE
            if isinstance(act, argparse._StoreFalseAction):
                val = not val
        else:
            try:
                val = act.type(raw) if act.type else raw
            except (TypeError, ValueError):
                raise UsageError(f"config key {key!r}: bad value {raw!r}") from None
            if act.choices and val not in act.choices:
                raise UsageError(f"config key {key!r}: {raw!r} not in {list(act.choices)}")
        defaults[key] = val
    sub.set_defaults(**defaults)


# -- parser -------------------------------------------------------------------------

def _frontend_flags(p):
    g = p.add_argument_group("front end")
    g.add_argument("--n-bands", dest="n_bands", type=int)
    g.add_argument("--win-len", dest="win_len", type=int)
    g.add_argument("--hop-len", dest="hop_len", type=int)
    g.add_argument("--fft-size", dest="fft_size", type=int)
    g.add_argument("--f-low", dest="f_low", type=float)
    g.add_argument("--f-high", dest="f_high", type=float)
    g.add_argument("--sample-rate", dest="sample_rate", type=int)
    g.add_argument("--log-compress", dest="log_compress", action=argparse.BooleanOptionalAction,
                   default=None)


def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="gtasc", description=__doc__.splitlines()[0])
    p.add_argument("-v", "--verbose", action="store_true")
    sp = p.add_subparsers(dest="command", required=True)

    def sub(name, help_):
        s = sp.add_parser(name, help=help_)
        s.add_argument("--config", help="key = value file; flags override it")
        return s

    s = sub("synth", "write a synthetic 10-class corpus")
    s.add_argument("--out-dir", required=True)
    s.add_argument("--seed", type=int, default=42)
    s.add_argument("--clips-per-class", type=int, default=30)
    s.add_argument("--duration", type=float, default=10.0, help="seconds per clip")
    s.add_argument("--val-fraction", type=float, default=0.2)

    s = sub("extract", "compute and cache gammatonegrams")
    s.add_argument("--meta", required=True, help="filename<TAB>scene_label file")
    s.add_argument("--audio-root", help="defaults to the metadata file's directory")
    s.add_argument("--cache", required=True)
    s.add_argument("--split", choices=data.SPLITS, default="train")
    s.add_argument("--jobs", type=int, default=1)
    _frontend_flags(s)

    s = sub("stats", "estimate per-band normalization statistics")
    s.add_argument("--cache", required=True)
    s.add_argument("--out", required=True)
    s.add_argument("--stats-split", choices=data.SPLITS, default="train")

    s = sub("train", "train the classifier on cached features")
    s.add_argument("--cache", required=True)
    s.add_argument("--stats", required=True)
    s.add_argument("--out", required=True, help="model artifact path (.ascm)")
    s.add_argument("--history", help="history CSV; defaults to <out>.history.csv")
    s.add_argument("--seed", type=int, default=0)
    s.add_argument("--max-epochs", dest="max_epochs", type=int)
    s.add_argument("--batch-size", dest="batch_size", type=int)
    s.add_argument("--lr", type=float)
    s.add_argument("--plateau-patience", dest="plateau_patience", type=int)
    s.add_argument("--early-stop-patience", dest="early_stop_patience", type=int)
    s.add_argument("--dtype", choices=("float32", "float64"))
    s.add_argument("--train-split", choices=data.SPLITS, default="train")
    s.add_argument("--val-split", choices=data.SPLITS, default="val")

    s = sub("eval", "score a model on labelled audio")
    s.add_argument("--model", required=True)
    s.add_argument("--meta", required=True)
    s.add_argument("--audio-root")

    s = sub("predict", "write filename,scene_label predictions")
    s.add_argument("--model", required=True)
    s.add_argument("--input-list", required=True, help="one audio path per line")
    s.add_argument("--audio-root", help="base for relative paths; defaults to the list's directory")
    s.add_argument("--out", required=True)

    s = sub("export", "fold batch norm and/or convert precision")
    s.add_argument("--model", required=True)
    s.add_argument("--out", required=True)
    s.add_argument("--precision", choices=("fp16", "fp32"), default="fp16")
    s.add_argument("--fold-bn", dest="fold_bn", action=argparse.BooleanOptionalAction, default=True)

    s = sub("size", "print the parameter/size report")
    s.add_argument("--model", required=True)
    return p


def parse_args(argv):
    parser = build_parser()
    ns = parser.parse_args(argv)
    if getattr(ns, "config", None):
        sub = parser._subparsers._group_actions[0].choices[ns.command]
        _apply_config(sub, read_config_file(ns.config))
        ns = parser.parse_args(argv)
    return ns


# -- commands ---------------------------------------------------------------------

def _err(msg):
    print(f"gtasc: {msg}", file=sys.stderr)


def cmd_synth(ns) -> int:
    index = data.synth_dataset(ns.out_dir, ns.seed, ns.clips_per_class, ns.duration, ns.val_fraction)
    print(f"wrote {len(index)} clips to {ns.out_dir} "
          f"({len(index.split('train'))} train, {len(index.split('val'))} val)")
    return EXIT_OK


def cmd_extract(ns) -> int:
    cfg = RunConfig.from_args(ns).frontend
    meta = Path(ns.meta)
    index = data.load_metadata(meta, ns.split)
    root = Path(ns.audio_root) if ns.audio_root else meta.parent
    total = len(index)
    done = [0]

    def progress(path, err):
        done[0] += 1
        if err:
            _err(f"failed {path}: {err}")
        elif ns.verbose:
            print(f"[{done[0]}/{total}] {path}", file=sys.stderr)

    rep = data.cache_features(index, root, ns.cache, cfg, jobs=max(1, ns.jobs), progress=progress)
    print(f"{rep.computed} recomputed, {rep.hits} cached, {len(rep.failures)} failed", file=sys.stderr)
    for path, msg in rep.failures:
        _err(f"{path}: {msg}")
    return EXIT_DATA if rep.failures else EXIT_OK


def _cache_split(cache, split):
    index = data.read_cache_index(cache).split(split)
    return index, data.load_cached(cache, index)


def cmd_stats(ns) -> int:
    index, feats = _cache_split(ns.cache, ns.stats_split)
    if len(index) < 1:
        raise UsageError(f"no '{ns.stats_split}' clips in cache {ns.cache}; run extract first")
    stats = dsp.accumulate_stats(feats)
    dsp.save_stats(stats, ns.out)
    print(f"stats over {len(index)} clips ({stats.count} frames) -> {ns.out}")
    return EXIT_OK


def _split(index, feats, stats):
    return train.Split(train.stack_features(feats, stats), index.label_ids(),
                       [e.device_id for e in index])


def cmd_train(ns) -> int:
    if not Path(ns.stats).exists():
        raise UsageError(f"stats file {ns.stats} not found; run stats first")
    run = RunConfig.from_args(ns)
    stats = dsp.load_stats(ns.stats)
    frontend = data.read_frontend(ns.cache)
    if frontend is None:
        raise UsageError(f"{ns.cache} holds no extracted features; run extract first")
    tr_idx, tr_feats = _cache_split(ns.cache, ns.train_split)
    va_idx, va_feats = _cache_split(ns.cache, ns.val_split)
    if not len(tr_idx) or not len(va_idx):
        raise UsageError(f"need both '{ns.train_split}' and '{ns.val_split}' clips in {ns.cache}")
    tr, va = _split(tr_idx, tr_feats, stats), _split(va_idx, va_feats, stats)

    model, history = train.train(nn.ModelSpec(n_classes=len(tr_idx.classes)), tr, va,
                                 run.training)
    art = modelio.from_model(model, tr_idx.classes, stats, frontend)
    modelio.save(art, ns.out)
    hist_path = ns.history or f"{ns.out}.history.csv"
    train.write_history(hist_path, history)
    best = max(r["val_acc"] for r in history)
    print(f"epochs {len(history)} best val accuracy {best:.4f}")
    print(f"model -> {ns.out}, history -> {hist_path}")
    return EXIT_OK


def _features_for(art: modelio.ModelArtifact, path: Path) -> np.ndarray:
    if art.frontend is None or art.norm_stats is None:
        raise modelio.FormatError("artifact lacks embedded front-end config or stats")
    clip = data.read_wav(path, art.frontend.sample_rate)
    m = dsp.apply_normalization(dsp.gammatonegram(clip, art.frontend), art.norm_stats)
    return np.asarray(m.values, dtype=np.float32)


def _predict_files(art, paths) -> np.ndarray:
    """Class ids; clips are grouped by frame count so each group is one batch stream."""
    model = modelio.to_model(art)
    feats = [_features_for(art, p) for p in paths]
    pred = np.empty(len(feats), dtype=np.int64)
    for width in sorted({f.shape[1] for f in feats}):
        ids = [i for i, f in enumerate(feats) if f.shape[1] == width]
        probs = model.predict(np.stack([feats[i] for i in ids]))
        pred[ids] = probs.argmax(axis=1)
    return pred


def cmd_eval(ns) -> int:
    art = modelio.load(ns.model)
    meta = Path(ns.meta)
    index = data.load_metadata(meta, "test")
    if not len(index):
        raise UsageError(f"{meta} lists no clips")
    root = Path(ns.audio_root) if ns.audio_root else meta.parent
    pred = _predict_files(art, [root / e.path for e in index])
    lut = {c: i for i, c in enumerate(art.classes)}
    truth = np.array([lut[e.scene_label] for e in index])
    correct = pred == truth
    print(f"accuracy {correct.mean():.4f} ({int(correct.sum())}/{len(index)})")
    devs = np.array([e.device_id for e in index])
    for d in sorted(set(devs)):
        print(f"device {d} {correct[devs == d].mean():.4f}")
    for c, name in enumerate(art.classes):
        sel = truth == c
        if sel.any():
            print(f"class {name} {correct[sel].mean():.4f}")
    return EXIT_OK


def cmd_predict(ns) -> int:
    art = modelio.load(ns.model)
    lst = Path(ns.input_list)
    names = [ln.strip() for ln in lst.read_text().splitlines() if ln.strip()]
    root = Path(ns.audio_root) if ns.audio_root else lst.parent
    pred = _predict_files(art, [root / n for n in names]) if names else []
    data.write_predictions(ns.out, [(n, art.classes[int(k)]) for n, k in zip(names, pred)])
    print(f"{len(names)} predictions -> {ns.out}")
    return EXIT_OK


def cmd_export(ns) -> int:
    art = modelio.load(ns.model)
    precision = "binary16" if ns.precision == "fp16" else "binary32"
    try:
        out = modelio.export(art, precision, ns.fold_bn)
    except nn.StateError as exc:
        raise UsageError(str(exc)) from None
    modelio.save(out, ns.out)
    print("\n".join(modelio.size_report(out).lines()))
    return EXIT_OK


def cmd_size(ns) -> int:
    print("\n".join(modelio.size_report(modelio.load(ns.model)).lines()))
    return EXIT_OK


COMMANDS = {"synth": cmd_synth, "extract": cmd_extract, "stats": cmd_stats, "train": cmd_train,
            "eval": cmd_eval, "predict": cmd_predict, "export": cmd_export, "size": cmd_size}


def main(argv=None) -> int:
    try:
        ns = parse_args(argv)
    except UsageError as exc:
        _err(str(exc))
        return EXIT_USAGE
    except SystemExit as exc:  # argparse usage errors
        return int(exc.code or 0)
    logging.basicConfig(level=logging.INFO if ns.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        return COMMANDS[ns.command](ns)
    except UsageError as exc:
        _err(str(exc))
        return EXIT_USAGE
    except DATA_ERRORS as exc:
        _err(str(exc))
        return EXIT_DATA


if __name__ == "__main__":
    sys.exit(main())
