"""``spurbench`` command line: mix, episodes, eval, swap, geometry, synth, sweep.

Settings resolve in three layers: built-in defaults, then ``--config
run.json`` (a file written by an earlier run), then explicit flags. The
resolved settings and seed are written to ``run.json`` in every output
directory; passing that file back through ``--config`` reproduces the run.
Exit status: 0 on success, 2 on usage errors, 1 on runtime failures.
"""

from __future__ import annotations

import argparse
import csv
import json
import os
import sys
from pathlib import Path
from typing import Any

import numpy as np

from . import __version__
from .catalog import Catalog, Variant, bundled_table, resolve_pairing, resolve_split
from .embeddings import EmbeddingSet, load_embedding_set, model_for_catalog, synth_embeddings
from .episodes import ClipPool, EpisodeSpec, Mode, sample_episodes, write_manifest
from .errors import SpurBenchError
from .evaluation import (gap_sweep, head_swap_matrix, run_eval, write_matrix_csv,
                         write_report_csv, write_report_json, write_sweep_csv)
from .frontend import dump_mel_csv, mel_spectrogram
from .geometry import contraction_report, mmd_rbf, write_geometry_csv, write_json
from .heads import DEFAULTS as HEAD_DEFAULTS
from .heads import HeadConfig
from .mixer import (MixParams, Waveform, integrated_loudness, mix_components, peak_normalize,
                    read_wav, write_wav)

SEED_ENV = "SPURBENCH_SEED"
HEAD_FLAGS = sorted({p for params in HEAD_DEFAULTS.values() for p in params})
# keys that never affect outputs and are left out of run.json
VOLATILE = {"out", "config", "jobs", "command"}

COMMON = {"pairing": "standard", "split": "canonical", "seed": None, "jobs": None}
EPISODE = {"mode": "iid", "n_way": 5, "k_shot": 5, "n_query": 10, "episodes": 100, "pool": None}
GENERATOR = {"beta": 0.02, "dim": 128, "angular_noise": 0.075, "shared_weight": 2.0,
             "per_combo": 20, "clean_per_class": 20}
HEAD = {"head": "proto", "head_params": {}}

DEFAULTS: dict[str, dict[str, Any]] = {
    "mix": {"alpha": 1.0, "gamma_db": 8.0, "rate": 16000, "duration": 5.0, "fg": [], "bg": [],
            "pairs": None, "format": "float32", "dump_mel": False, "random_crop": False,
            "seed": None},
    "episodes": {**COMMON, **EPISODE},
    "eval": {**COMMON, **EPISODE, **GENERATOR, **HEAD, "modes": ["iid", "ood"], "embeddings": None,
             "aggregate": "episodes", "n_seeds": 1},
    "swap": {**COMMON, **EPISODE, **GENERATOR, "modes": ["iid", "ood"],
             "heads": ["proto", "cosine", "protolp"], "embeddings": [], "betas": [0.0, 0.02, 0.3]},
    "geometry": {**COMMON, **GENERATOR, "embeddings": None, "compare": None, "n_per_class": 500,
                 "bandwidth": None},
    "synth": {**COMMON, **GENERATOR, "n_frames": 0},
    "sweep": {**COMMON, **EPISODE, **GENERATOR, **HEAD, "episodes": 2000,
              "strengths": [0.0, 0.1, 0.2, 0.3]},
}


class UsageError(Exception):
    pass


def _floats(text: str) -> list[float]:
    try:
        return [float(t) for t in text.split(",") if t.strip()]
    except ValueError:
        raise argparse.ArgumentTypeError(f"expected comma-separated numbers, got {text!r}")


def _words(text: str) -> list[str]:
    return [t.strip() for t in text.split(",") if t.strip()]


def _add_common(p):
    p.add_argument("--out", required=True, help="output directory")
    p.add_argument("--config", help="run.json of an earlier run (flags override it)")
    p.add_argument("--seed", type=int, help=f"base seed (default ${SEED_ENV} or 0)")
    p.add_argument("--jobs", type=int, help="worker processes (default: logical cores)")


def _add_catalog(p):
    p.add_argument("--pairing", help="standard | hard | path to a pairing table")
    p.add_argument("--split", help="canonical | seeded:<seed>")


def _add_episode(p):
    p.add_argument("--mode", choices=[m.value for m in Mode])
    p.add_argument("--n-way", type=int)
    p.add_argument("--k-shot", type=int)
    p.add_argument("--n-query", type=int)
    p.add_argument("--episodes", type=int, help="number of episodes per mode")
    p.add_argument("--pool", help="clip pool CSV (clip_ref,fg,bg); default: synthetic pool")


def _add_generator(p):
    g = p.add_argument_group("synthetic generator")
    g.add_argument("--beta", type=float, help="background weight")
    g.add_argument("--dim", type=int)
    g.add_argument("--angular-noise", type=float)
    g.add_argument("--shared-weight", type=float)
    g.add_argument("--per-combo", type=int, help="synthetic clips per (class, background)")
    g.add_argument("--clean-per-class", type=int)


def _add_head(p):
    p.add_argument("--head", choices=sorted(HEAD_DEFAULTS))
    h = p.add_argument_group("head hyperparameters (only those of the chosen head apply)")
    for name in HEAD_FLAGS:
        if name == "normalize":
            h.add_argument("--normalize", dest="normalize", action=argparse.BooleanOptionalAction)
        elif name in ("k", "knn", "n_iter", "max_iter"):
            h.add_argument("--" + name.replace("_", "-"), type=int)
        else:
            h.add_argument("--" + name.replace("_", "-"), type=float)


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="spurbench", description=__doc__.splitlines()[0])
    parser.add_argument("--version", action="version", version=f"%(prog)s {__version__}")
    sub = parser.add_subparsers(dest="command", required=True)
    kw = {"argument_default": argparse.SUPPRESS}

    p = sub.add_parser("mix", help="mix foreground/background WAVs", **kw)
    _add_common(p)
    p.add_argument("--fg", action="append", help="foreground WAV (repeat, paired with --bg)")
    p.add_argument("--bg", action="append", help="background WAV")
    p.add_argument("--pairs", help="CSV with fg,bg columns (paths relative to the CSV)")
    p.add_argument("--alpha", type=float)
    p.add_argument("--gamma-db", type=float)
    p.add_argument("--rate", type=int)
    p.add_argument("--duration", type=float)
    p.add_argument("--format", choices=["float32", "pcm16"])
    p.add_argument("--dump-mel", action="store_true", help="also write log-mel CSVs")
    p.add_argument("--random-crop", action="store_true", help="crop long clips at a seeded offset")

    p = sub.add_parser("episodes", help="sample episode manifests", **kw)
    _add_common(p)
    _add_catalog(p)
    _add_episode(p)

    p = sub.add_parser("eval", help="evaluate a head on IID/OOD episodes", **kw)
    _add_common(p)
    _add_catalog(p)
    _add_episode(p)
    p.add_argument("--modes", type=_words, help="comma-separated modes (default iid,ood)")
    p.add_argument("--embeddings", help="embedding manifest; default: synthetic generator")
    p.add_argument("--aggregate", choices=["episodes", "seeds"])
    p.add_argument("--n-seeds", type=int, help="episode seeds for --aggregate seeds")
    _add_generator(p)
    _add_head(p)

    p = sub.add_parser("swap", help="head x embedding-set matrix", **kw)
    _add_common(p)
    _add_catalog(p)
    _add_episode(p)
    p.add_argument("--modes", type=_words)
    p.add_argument("--heads", type=_words)
    p.add_argument("--embeddings", action="append", help="NAME=manifest (repeatable)")
    p.add_argument("--betas", type=_floats, help="synthetic columns when no --embeddings")
    _add_generator(p)

    p = sub.add_parser("geometry", help="magnitude/cosine contraction and MMD reports", **kw)
    _add_common(p)
    _add_catalog(p)
    p.add_argument("--embeddings", help="embedding manifest (needs --pool); default: synthetic")
    p.add_argument("--pool", help="clip pool CSV naming fg/bg for each clip")
    p.add_argument("--compare", help="second embedding manifest for MMD against --embeddings")
    p.add_argument("--n-per-class", type=int, help="synthetic clean/mixed samples per class")
    p.add_argument("--bandwidth", type=float, help="RBF bandwidth (default: median heuristic)")
    _add_generator(p)

    p = sub.add_parser("synth", help="write a synthetic embedding set and its pool", **kw)
    _add_common(p)
    _add_catalog(p)
    _add_generator(p)
    p.add_argument("--n-frames", type=int, help="local descriptors per clip (for dn4)")

    p = sub.add_parser("sweep", help="gap vs background strength", **kw)
    _add_common(p)
    _add_catalog(p)
    _add_episode(p)
    p.add_argument("--strengths", type=_floats)
    _add_generator(p)
    _add_head(p)
    return parser


def resolve(args: argparse.Namespace) -> dict[str, Any]:
    """Defaults < config file < explicit flags."""
    given = vars(args).copy()
    cmd = given.pop("command")
    cfg: dict[str, Any] = {}
    if "config" in given:
        try:
            with open(given["config"]) as fh:
                doc = json.load(fh)
        except (OSError, json.JSONDecodeError) as exc:
            raise UsageError(f"cannot read config {given['config']}: {exc}")
        if doc.get("command", cmd) != cmd:
            raise UsageError(f"config is for {doc['command']!r}, not {cmd!r}")
        cfg = doc.get("args", {})
    settings = {**DEFAULTS[cmd], **cfg}
    unknown = set(cfg) - set(DEFAULTS[cmd])
    if unknown:
        raise UsageError(f"config has unknown keys {sorted(unknown)}")
    flags = {name: given.pop(name) for name in HEAD_FLAGS if name in given}
    settings.update(given)
    if "modes" in settings and "mode" in given and "modes" not in given:
        settings["modes"] = [given["mode"]]
    if "head" in settings:
        # config hyperparameters only carry over while the head kind is unchanged
        kept = cfg.get("head_params", {}) if cfg.get("head", settings["head"]) == settings["head"] else {}
        allowed = HEAD_DEFAULTS[settings["head"]]
        stray = sorted(set(flags) - set(allowed))
        if stray:
            raise UsageError(f"{settings['head']} head does not take {', '.join('--' + f for f in stray)}")
        merged = {**kept, **flags}
        settings["head_params"] = {k: v for k, v in sorted(merged.items()) if k in allowed}
    _check_paths(settings)
    if settings.get("seed") is None:
        env = os.environ.get(SEED_ENV)
        try:
            settings["seed"] = int(env) if env is not None else 0
        except ValueError:
            raise UsageError(f"{SEED_ENV} must be an integer, got {env!r}")
    if settings.get("jobs") is None:
        settings["jobs"] = os.cpu_count() or 1
    settings["command"] = cmd
    return settings


PATH_KEYS = ("embeddings", "pool", "compare", "pairs", "fg", "bg")


def _check_paths(s: dict) -> None:
    paths = []
    for key in PATH_KEYS:
        v = s.get(key)
        if isinstance(v, list):
            paths += [x.partition("=")[2] if key == "embeddings" else x for x in v]
        elif v:
            paths.append(v)
    if s.get("pairing") not in (None, "standard", "hard"):
        paths.append(s["pairing"])
    for path in paths:
        if not Path(path).exists():
            raise UsageError(f"no such file: {path}")


def _write_run(out: Path, s: dict) -> None:
    record = {"command": s["command"], "version": __version__,
              "args": {k: v for k, v in sorted(s.items()) if k not in VOLATILE}}
    write_json(out / "run.json", record)


# ---------------------------------------------------------------- shared setup

def _catalog(s) -> Catalog:
    table = resolve_pairing(s["pairing"])
    hard = table if table.variant is Variant.HARD else None
    if s["pairing"] == "standard":
        hard = bundled_table(Variant.HARD)
    return Catalog(table, resolve_split(table, s["split"]), hard)


def _model(s, cat: Catalog, beta: float | None = None):
    return model_for_catalog(cat, cat.classes("test"), dim=s["dim"],
                             angular_noise=s["angular_noise"], shared_weight=s["shared_weight"],
                             bg_weight=s["beta"] if beta is None else beta, seed=s["seed"])


def _synthetic_pool(s, cat: Catalog, model) -> ClipPool:
    return ClipPool.synthetic(cat.table, cat.classes("test"), per_combo=s["per_combo"],
                              clean_per_class=s["clean_per_class"], backgrounds=model.backgrounds)


def _pool(s, cat: Catalog, model=None) -> ClipPool:
    if s.get("pool"):
        return ClipPool.from_csv(s["pool"])
    if model is None:
        model = _model({**GENERATOR, **s}, cat)
    return _synthetic_pool({**GENERATOR, **s}, cat, model)


def _episodes(s, cat, pool, modes, seed_offset: int = 0):
    eps = []
    for mode in modes:
        spec = EpisodeSpec(s["n_way"], s["k_shot"], s["n_query"], Mode(mode), s["seed"] + seed_offset)
        eps += sample_episodes(cat, spec, pool, s["episodes"])
    return eps


def _n_frames(heads) -> int:
    return 8 if any(h.kind == "dn4" for h in heads) else 0


# ---------------------------------------------------------------- commands

def cmd_mix(s, out: Path) -> None:
    if s["pairs"]:
        base = Path(s["pairs"]).parent
        with open(s["pairs"], newline="") as fh:
            pairs = [(base / r["fg"], base / r["bg"]) for r in csv.DictReader(fh)]
    else:
        if len(s["fg"]) != len(s["bg"]):
            raise UsageError("--fg and --bg must be given the same number of times")
        pairs = [(Path(f), Path(b)) for f, b in zip(s["fg"], s["bg"])]
    if not pairs:
        raise UsageError("nothing to mix: give --fg/--bg or --pairs")
    p = MixParams(s["alpha"], s["gamma_db"], s["rate"], s["duration"])
    rng = np.random.default_rng(s["seed"]) if s["random_crop"] else None
    rows = []
    for i, (f, b) in enumerate(pairs):
        fg_w, scaled = mix_components(read_wav(f), read_wav(b), p, rng)
        mix = peak_normalize(Waveform(fg_w.samples + scaled.samples, fg_w.sample_rate))
        name = f"mix_{i:04d}"
        write_wav(out / f"{name}.wav", mix, s["format"])
        if s["dump_mel"]:
            dump_mel_csv(out / f"{name}.mel.csv", mel_spectrogram(mix))
        l_fg = integrated_loudness(fg_w).lufs
        l_bg = integrated_loudness(scaled).lufs if s["alpha"] > 0 else float("-inf")
        rows.append([name + ".wav", str(f), str(b), repr(l_fg), repr(l_bg)])
    with open(out / "manifest.csv", "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["mixture", "fg", "bg", "fg_lufs", "scaled_bg_lufs"])
        w.writerows(rows)


def cmd_episodes(s, out: Path) -> None:
    cat = _catalog(s)
    pool = _pool(s, cat)
    eps = _episodes(s, cat, pool, [s["mode"]])
    write_manifest(out / "episodes.tsv", eps)
    if not s.get("pool"):
        pool.to_csv(out / "pool.csv")


def _eval_inputs(s, cat):
    if s.get("embeddings"):
        emb = load_embedding_set(s["embeddings"])
        if not s.get("pool"):
            raise UsageError("--embeddings needs --pool to know each clip's fg/bg")
        return ClipPool.from_csv(s["pool"]), emb, None
    model = _model(s, cat)
    pool = _pool(s, cat, model)
    return pool, None, model


def cmd_eval(s, out: Path) -> None:
    cat = _catalog(s)
    head = HeadConfig(s["head"], s["head_params"])
    pool, emb, model = _eval_inputs(s, cat)
    if emb is None:
        emb = synth_embeddings(model, pool.clips.values(), seed=s["seed"], n_frames=_n_frames([head]))
        label = f"synthetic(beta={s['beta']!r})"
    else:
        label = Path(s["embeddings"]).name
    eps, groups = [], []
    n_seeds = s["n_seeds"] if s["aggregate"] == "seeds" else 1
    for g in range(n_seeds):
        batch = _episodes(s, cat, pool, s["modes"], seed_offset=g)
        eps += batch
        groups += [g] * len(batch)
    rep = run_eval(eps, head, emb, s["jobs"], s["aggregate"], groups, label)
    write_report_csv(out / "report.csv", [rep])
    write_report_json(out / "report.json", [rep])


def cmd_swap(s, out: Path) -> None:
    cat = _catalog(s)
    heads = [HeadConfig(h) for h in s["heads"]]
    sets: dict[str, EmbeddingSet] = {}
    if s["embeddings"]:
        if not s.get("pool"):
            raise UsageError("--embeddings needs --pool")
        pool = ClipPool.from_csv(s["pool"])
        for entry in s["embeddings"]:
            name, sep, path = entry.partition("=")
            if not sep:
                raise UsageError(f"--embeddings expects NAME=path, got {entry!r}")
            sets[name] = load_embedding_set(path)
    else:
        model = _model(s, cat)
        pool = _pool(s, cat, model)
        for b in s["betas"]:
            sets[f"beta={b!r}"] = synth_embeddings(model.replace(bg_weight=b), pool.clips.values(),
                                                   seed=s["seed"], n_frames=_n_frames(heads))
    eps = _episodes(s, cat, pool, s["modes"])
    matrix = head_swap_matrix(sets, heads, eps, s["jobs"])
    write_matrix_csv(out / "matrix.csv", matrix, "gap")
    for mode in s["modes"]:
        write_matrix_csv(out / f"matrix_{mode}.csv", matrix, mode)
    write_report_csv(out / "report.csv", list(matrix.values()))
    write_report_json(out / "report.json", list(matrix.values()))


def _synthetic_geometry_items(s, cat, model):
    """Clean and in-pairing mixed items, ``n_per_class`` of each per test class."""
    from .episodes import Item
    clean, mixed = [], []
    n = s["n_per_class"]
    for c in cat.classes("test"):
        bgs = cat.table[c]
        clean += [Item(f"{c}|-|{i:04d}", c, None) for i in range(n)]
        mixed += [Item(f"{c}|{bgs[i % len(bgs)]}|{i:04d}", c, bgs[i % len(bgs)]) for i in range(n)]
    return clean, mixed


def cmd_geometry(s, out: Path) -> None:
    cat = _catalog(s)
    if s.get("embeddings"):
        if not s.get("pool"):
            raise UsageError("--embeddings needs --pool to know each clip's fg/bg")
        emb = load_embedding_set(s["embeddings"])
        items = [it for it in ClipPool.from_csv(s["pool"]).clips.values() if it.clip_ref in emb]
        clean = [it for it in items if it.is_clean]
        mixed = [it for it in items if not it.is_clean]
        label = Path(s["embeddings"]).name
    else:
        model = _model(s, cat)
        clean, mixed = _synthetic_geometry_items(s, cat, model)
        emb = synth_embeddings(model, clean + mixed, seed=s["seed"])
        label = f"synthetic(beta={s['beta']!r})"
    rep = contraction_report(emb.vectors(i.clip_ref for i in clean), [i.fg for i in clean],
                             emb.vectors(i.clip_ref for i in mixed), [i.fg for i in mixed],
                             label=label)
    write_geometry_csv(out / "geometry.csv", [rep])
    write_json(out / "geometry.json", rep.to_dict())
    if s.get("compare"):
        other = load_embedding_set(s["compare"])
        dist = mmd_rbf(emb.matrix, other.matrix, s["bandwidth"])
        write_json(out / "distribution.json", dist.to_dict())


def cmd_synth(s, out: Path) -> None:
    cat = _catalog(s)
    model = _model(s, cat)
    pool = _synthetic_pool(s, cat, model)
    emb = synth_embeddings(model, pool.clips.values(), seed=s["seed"], n_frames=s["n_frames"])
    emb.save(out / "embeddings.json")
    pool.to_csv(out / "pool.csv")


def cmd_sweep(s, out: Path) -> None:
    cat = _catalog(s)
    head = HeadConfig(s["head"], s["head_params"])
    model = _model(s, cat)
    pool = _pool(s, cat, model)
    iid = _episodes(s, cat, pool, ["iid"])
    ood = _episodes(s, cat, pool, ["ood"])
    nf = _n_frames([head])

    def make(beta):
        return synth_embeddings(model.replace(bg_weight=beta), pool.clips.values(),
                                seed=s["seed"], n_frames=nf)

    write_sweep_csv(out / "sweep.csv", gap_sweep(s["strengths"], make, iid, ood, head, s["jobs"]))


COMMANDS = {"mix": cmd_mix, "episodes": cmd_episodes, "eval": cmd_eval, "swap": cmd_swap,
            "geometry": cmd_geometry, "synth": cmd_synth, "sweep": cmd_sweep}


def main(argv: list[str] | None = None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)   # exits 2 on bad flags
    try:
        s = resolve(args)
        if "modes" in s:
            bad = [m for m in s["modes"] if m not in {x.value for x in Mode}]
            if bad:
                raise UsageError(f"unknown mode(s) {bad}")
        if "head" in s:
            HeadConfig(s["head"], s["head_params"])
    except (UsageError, SpurBenchError) as exc:
        parser.print_usage(sys.stderr)
        print(f"spurbench: error: {exc}", file=sys.stderr)
        return 2
    out = Path(s["out"])
    try:
        out.mkdir(parents=True, exist_ok=True)
        COMMANDS[s["command"]](s, out)
    except UsageError as exc:
        print(f"spurbench: error: {exc}", file=sys.stderr)
        return 2
    except (SpurBenchError, OSError, ValueError) as exc:
        print(f"spurbench {s['command']}: {exc}", file=sys.stderr)
        return 1
    _write_run(out, s)
    return 0


if __name__ == "__main__":
    sys.exit(main())
