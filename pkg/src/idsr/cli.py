"""``idsr`` command line: synth | train | eval | sr | gradcheck.

Exit codes: 0 success, 1 runtime failure, 2 usage error.
"""
from __future__ import annotations

import argparse
import logging
import sys
import zlib
from dataclasses import fields
from pathlib import Path

import numpy as np

from . import dataio, evalkit, frnet, ipunet, trainer
from .experiments import TOY_SCHEDULE
from .resample import NETWORK_SIZE, DegradationSpec, bicubic_resize, degrade

log = logging.getLogger("idsr")

RUN_CONFIG = "run_config.txt"
EMBEDDER_FILE = "embedder.frem"
MODEL_FILE = "model.ckpt"


class UsageError(Exception):
    """Bad flag or config value; maps to exit code 2."""


def split_seed(root: int, subsystem: str) -> int:
    """Deterministic per-subsystem seed derived from the root seed."""
    ss = np.random.SeedSequence([int(root), zlib.crc32(subsystem.encode())])
    return int(ss.generate_state(1)[0])


# -- config files ----------------------------------------------------------------

def read_kv(path) -> dict:
    """``key=value`` lines; blank lines and ``#`` comments ignored."""
    out = {}
    for lineno, line in enumerate(Path(path).read_text().splitlines(), 1):
        line = line.split("#", 1)[0].strip()
        if not line:
            continue
        key, sep, value = line.partition("=")
        if not sep:
            raise UsageError(f"{path}:{lineno}: expected key=value")
        out[key.strip()] = value.strip()
    return out


def write_kv(path, items: dict) -> None:
    Path(path).write_text("".join(f"{k}={v}\n" for k, v in items.items()))


def _schedule(text: str) -> tuple:
    if text == "toy":
        return TOY_SCHEDULE
    if text == "default":
        return ipunet.DEFAULT_SCHEDULE
    try:
        return tuple(int(v) for v in text.split(","))
    except ValueError:
        raise UsageError(f"bad channel schedule {text!r}") from None


def _bool(text: str) -> bool:
    t = text.lower()
    if t in ("1", "true", "yes", "on"):
        return True
    if t in ("0", "false", "no", "off"):
        return False
    raise UsageError(f"bad boolean {text!r}")


_TRAIN_KEYS = {
    "lr": float, "beta1": float, "beta2": float, "eps": float, "batch_size": int, "steps": int,
    "checkpoint_every": int, "workers": int,
    "clip_norm": lambda v: None if v.lower() in ("", "none") else float(v),
    "resolution_set": lambda v: tuple(DegradationSpec.parse(r) for r in v.split(",") if r.strip()),
}
_NET_KEYS = {"channel_schedule": _schedule, "dropout_p": float, "leaky_slope": float, "skip_connections": _bool}
_LOSS_KEYS = {"beta": float, "embedding_weight": float}
_OTHER_KEYS = {"seed": int, "embedder": str, "embedder_steps": int}


def resolve_run_config(file_values: dict, overrides: dict) -> dict:
    """Merge config-file values with flag overrides (flags win) into typed settings."""
    merged = {"seed": "0", "steps": "1000", "channel_schedule": "toy", "beta": "5.0", "embedding_weight": "1.0",
              "embedder": "pretrain", "embedder_steps": "1500"}
    merged.update(file_values)
    merged.update({k: str(v) for k, v in overrides.items() if v is not None})
    known = {**_TRAIN_KEYS, **_NET_KEYS, **_LOSS_KEYS, **_OTHER_KEYS}
    unknown = sorted(set(merged) - set(known))
    if unknown:
        raise UsageError(f"unknown config keys: {', '.join(unknown)}")
    try:
        return {k: known[k](v) for k, v in merged.items()}
    except ValueError as exc:
        raise UsageError(f"bad config value: {exc}") from None


def build_configs(rc: dict, in_channels: int):
    root = rc["seed"]
    net_cfg = ipunet.IPUNetConfig(in_channels=in_channels, seed=split_seed(root, "init"),
                                  **{k: rc[k] for k in _NET_KEYS if k in rc})
    train_kw = {k: rc[k] for k in _TRAIN_KEYS if k in rc}
    train_cfg = trainer.TrainConfig(seed=split_seed(root, "sampler"),
                                    weights=trainer.LossWeights(rc["beta"], rc["embedding_weight"]), **train_kw)
    return net_cfg, train_cfg


def dump_run_config(path, rc: dict, net_cfg, train_cfg, extra: dict | None = None) -> None:
    items = {"root_seed": rc["seed"], "seed.init": net_cfg.seed, "seed.dropout": f"{net_cfg.seed}:0xD0",
             "seed.sampler": train_cfg.seed, "seed.embedder": split_seed(rc["seed"], "embedder")}
    for f in fields(train_cfg):
        v = getattr(train_cfg, f.name)
        if f.name == "weights":
            items["beta"] = v.beta
            items["embedding_weight"] = v.embedding_weight
        elif f.name == "resolution_set":
            items[f.name] = ",".join(map(str, v))
        elif f.name != "seed":
            items[f.name] = v
    for f in fields(net_cfg):
        if f.name != "seed":
            v = getattr(net_cfg, f.name)
            items[f"net.{f.name}"] = ",".join(map(str, v)) if isinstance(v, tuple) else v
    w = train_cfg.weights
    if w.beta == 0:
        items["loss_mode"] = "embedding-only"
    elif w.embedding_weight == 0:
        items["loss_mode"] = "pixel-only"
    else:
        items["loss_mode"] = "joint"
    items["embedder"] = rc["embedder"]
    items["embedder_steps"] = rc["embedder_steps"]
    items.update(extra or {})
    write_kv(path, items)


def _manifest_path(data) -> Path:
    p = Path(data)
    return p / dataio.MANIFEST_NAME if p.is_dir() else p


# -- commands --------------------------------------------------------------------

def cmd_synth(args) -> int:
    m = dataio.make_synthetic_dataset(args.out, args.identities, args.images_per_id,
                                      seed=args.seed, channels=args.channels, ext="." + args.format)
    print(m.root / dataio.MANIFEST_NAME)
    return 0


def _get_embedder(spec: str, rc_seed: int, channels: int, train_imgs, train_labels, steps: int):
    if spec == "pretrain":
        if len(set(train_labels)) < 2:
            raise ValueError("pretraining the embedder needs train rows from at least two identities")
        emb = frnet.ToyEmbedder(in_channels=channels, seed=split_seed(rc_seed, "embedder"))
        return frnet.pretrain_embedder(emb, train_imgs, train_labels, steps=steps,
                                       seed=split_seed(rc_seed, "embedder"), log=log.info)
    if spec == "random":
        return frnet.ToyEmbedder(in_channels=channels, seed=split_seed(rc_seed, "embedder"))
    return frnet.load_embedder(spec)


def cmd_train(args) -> int:
    file_values = read_kv(args.config) if args.config else {}
    rc = resolve_run_config(file_values, {"steps": args.steps, "seed": args.seed, "beta": args.beta,
                                          "embedding_weight": args.embedding_weight, "embedder": args.embedder,
                                          "checkpoint_every": args.checkpoint_every})
    manifest = dataio.read_manifest(_manifest_path(args.data))
    recs, imgs = manifest.load("train")
    if not recs:
        raise ValueError(f"{args.data}: manifest has no train rows")
    if imgs.shape[2:] != NETWORK_SIZE:
        imgs = bicubic_resize(imgs, *NETWORK_SIZE).astype(np.float32)
    labels = [r.label for r in recs]
    net_cfg, train_cfg = build_configs(rc, imgs.shape[1])

    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    if args.resume:
        emb_path = Path(args.resume).parent.parent / EMBEDDER_FILE
        emb = frnet.load_embedder(emb_path if emb_path.exists() else out / EMBEDDER_FILE)
    else:
        emb = _get_embedder(rc["embedder"], rc["seed"], imgs.shape[1], imgs, labels, rc["embedder_steps"])
    frnet.save_embedder(emb, out / EMBEDDER_FILE)
    dump_run_config(out / RUN_CONFIG, rc, net_cfg, train_cfg,
                    {"data": _manifest_path(args.data), "resume": args.resume or ""})

    def progress(row):
        if row.step % 100 == 0 or row.step == train_cfg.steps - 1:
            log.info("step %d res %dx%d l_pixel %.5f l_embedding %.5f l_total %.5f", row.step, row.res_h, row.res_w,
                     row.l_pixel, row.l_embedding, row.l_total)

    net, report = trainer.train_loop(imgs, train_cfg, emb, net_config=net_cfg, checkpoint_dir=out / "checkpoints",
                                     resume=args.resume, progress=progress)
    final = out / "checkpoints" / "last.ckpt"
    (out / MODEL_FILE).write_bytes(final.read_bytes())
    report.write_csv(out / "report.csv")
    print(out / MODEL_FILE)
    return 0


def _find_embedder(args):
    if args.embedder == "lookup":
        return None
    if args.embedder:
        return frnet.load_embedder(args.embedder)
    if args.ckpt:
        cand = Path(args.ckpt).parent / EMBEDDER_FILE
        if cand.exists():
            return frnet.load_embedder(cand)
    raise ValueError("no embedder: pass --embedder FILE|lookup or keep embedder.frem next to the checkpoint")


def _external_embeddings(args, manifest):
    """CMC from precomputed records, matched to manifest rows by root-relative path."""
    records = frnet.read_embedding_records(args.embeddings)
    by_path = {Path(path).as_posix(): vec for _, path, vec in records}

    def vectors(recs):
        out = []
        for r in recs:
            p = Path(r.path)
            key = p.relative_to(manifest.root).as_posix() if p.is_relative_to(manifest.root) else p.as_posix()
            if key not in by_path:
                raise ValueError(f"{args.embeddings}: no embedding for {key}")
            out.append(by_path[key])
        return np.stack(out)

    g, p = manifest.by_role("gallery"), manifest.by_role("probe")
    curve = evalkit.evaluate_embeddings([r.label for r in g], vectors(g), [r.label for r in p], vectors(p))
    dim = len(records[0][2]) if records else 0
    return evalkit.ProtocolResult(evalkit.ProtocolSpec(name="external"), {"external": curve}, dim, "external")


def cmd_eval(args) -> int:
    spec = evalkit.load_protocol(args.protocol) if args.protocol else evalkit.ProtocolSpec()
    if args.concat_embeddings:
        spec.concat_embeddings = True
    manifest = dataio.read_manifest(_manifest_path(args.data))
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    if args.embeddings:
        result = _external_embeddings(args, manifest)
    else:
        net = ipunet.load_checkpoint(args.ckpt) if args.ckpt else None
        emb = _find_embedder(args)
        if emb is None:
            emb = frnet.LookupEmbedder(manifest.labels())
        method = "ipunet" if net is not None else "bicubic"
        if spec.concat_embeddings and net is not None:
            method += "+concat"
        result = evalkit.run_protocol_on_manifest(spec, net, emb, manifest, method=method)
    log.info("embedding dim: %d", result.embedding_dim)
    result.write_cmc_csv(out / "cmc.csv")
    result.write_rank1_csv(out / "rank1.csv")
    (out / "protocol.txt").write_text(evalkit.format_protocol(result.spec))
    write_kv(out / RUN_CONFIG, {"data": _manifest_path(args.data), "ckpt": args.ckpt or "", "protocol": args.protocol or "",
                                "embedder": args.embedder or "", "embeddings": args.embeddings or "",
                                "concat_embeddings": spec.concat_embeddings, "embedding_dim": result.embedding_dim})
    for cond, acc in result.rank1_table().items():
        print(f"{cond} rank1={acc:.4f}")
    return 0


def cmd_sr(args) -> int:
    net = ipunet.load_checkpoint(args.ckpt)
    img = dataio.load_image(args.input)
    if img.shape[0] != net.config.in_channels:
        raise ValueError(f"{args.input}: {img.shape[0]} channels, checkpoint expects {net.config.in_channels}")
    size = net.config.input_size
    x = bicubic_resize(img, size, size)
    if args.lowres:
        x = degrade(x, DegradationSpec.parse(args.lowres), size=(size, size))
    sr = trainer.super_resolve(net, x[None])[0]
    dataio.save_image(args.out, sr)
    print(args.out)
    return 0


def cmd_gradcheck(args) -> int:
    from .tensorcore import GRADCHECK_CASES, run_all

    names = None
    if args.ops != "all":
        names = [n.strip() for n in args.ops.split(",")]
        bad = [n for n in names if n not in GRADCHECK_CASES]
        if bad:
            raise UsageError(f"unknown op(s) {', '.join(bad)}; choose from {', '.join(GRADCHECK_CASES)}")
    failures = 0
    for name, idx, report in run_all(names, args.tolerance, args.seed):
        print(f"{name}[{idx}] {report}")
        failures += not report.passed
    print(f"{'FAIL' if failures else 'PASS'}: {failures} failing case(s)")
    return 1 if failures else 0


# -- parser ----------------------------------------------------------------------

def _positive(text):
    v = int(text)
    if v < 1:
        raise argparse.ArgumentTypeError("must be >= 1")
    return v


def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="idsr", description=__doc__.splitlines()[0])
    p.add_argument("-v", "--verbose", action="store_true")
    sub = p.add_subparsers(dest="command", required=True)

    s = sub.add_parser("synth", help="render a synthetic identity dataset")
    s.add_argument("--out", required=True)
    s.add_argument("--identities", type=_positive, required=True)
    s.add_argument("--images-per-id", type=_positive, required=True)
    s.add_argument("--seed", type=int, default=0)
    s.add_argument("--channels", type=int, choices=(1, 3), default=3)
    s.add_argument("--format", choices=("png", "pgm", "ppm"), default="png")
    s.set_defaults(func=cmd_synth)

    t = sub.add_parser("train", help="train the super-resolution network")
    t.add_argument("--data", required=True, help="manifest.csv or its directory")
    t.add_argument("--out", required=True)
    t.add_argument("--config", help="key=value file; flags override it")
    t.add_argument("--steps", type=int)
    t.add_argument("--seed", type=int)
    t.add_argument("--beta", type=float)
    t.add_argument("--embedding-weight", type=float)
    t.add_argument("--embedder", help="pretrain (default), random, or a saved embedder file")
    t.add_argument("--checkpoint-every", type=int)
    t.add_argument("--resume", help="training checkpoint to continue from")
    t.set_defaults(func=cmd_train)

    e = sub.add_parser("eval", help="closed-set identification on gallery/probe rows")
    e.add_argument("--data", required=True)
    e.add_argument("--out", required=True)
    e.add_argument("--ckpt", help="generator checkpoint; omit for the bicubic baseline")
    e.add_argument("--protocol", help="protocol file (key=value)")
    e.add_argument("--concat-embeddings", action="store_true")
    e.add_argument("--embedder", help="saved embedder file, or 'lookup' for the label oracle")
    e.add_argument("--embeddings", help="precomputed embedding records instead of running an embedder")
    e.set_defaults(func=cmd_eval)

    r = sub.add_parser("sr", help="super-resolve one image")
    r.add_argument("--ckpt", required=True)
    r.add_argument("--in", dest="input", required=True)
    r.add_argument("--out", required=True)
    r.add_argument("--lowres", help="degrade to HxW first")
    r.set_defaults(func=cmd_sr)

    g = sub.add_parser("gradcheck", help="finite-difference check of every op")
    g.add_argument("--ops", default="all")
    g.add_argument("--tolerance", type=float, default=1e-4)
    g.add_argument("--seed", type=int, default=0)
    g.set_defaults(func=cmd_gradcheck)
    return p


def main(argv=None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as exc:
        return int(exc.code or 0)
    logging.basicConfig(level=logging.DEBUG if args.verbose else logging.INFO, format="%(levelname)s %(message)s",
                        stream=sys.stderr, force=True)
    try:
        return args.func(args)
    except UsageError as exc:
        parser.print_usage(sys.stderr)
        print(f"idsr: error: {exc}", file=sys.stderr)
        return 2
    except Exception as exc:  # noqa: BLE001 - every module error becomes exit code 1
        log.debug("traceback", exc_info=True)
        print(f"idsr: error: {exc}", file=sys.stderr)
        return 1


if __name__ == "__main__":
    sys.exit(main())
