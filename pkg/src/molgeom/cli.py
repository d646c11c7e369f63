"""Command-line front end.

Exit codes: 0 success, 2 schema or input error (including unreadable files
and bad usage), 3 geometry error, 4 sequence longer than l_max, 5 grammar,
token or SELFIES/conformer mismatch, 6 shape or mask error, 1 anything else
raised by the library.
"""

from __future__ import annotations

import argparse
import json
import os
import sys
from concurrent.futures import ThreadPoolExecutor
from pathlib import Path

import numpy as np

from molgeom import io as mio
from molgeom import pipeline
from molgeom.config import DECODE_MODES, FUSION_MODES, PipelineConfig
from molgeom.deepencoder import DeepEncoder, synthetic_image
from molgeom.e3fp import fingerprint
from molgeom.errors import MolgeomError, SchemaError
from molgeom.molgraph import parse_conformer

EXIT_OK = 0
EXIT_INPUT = 2


def _config(args) -> PipelineConfig:
    if args.config:
        cfg = PipelineConfig.load(args.config)
    else:
        cfg = PipelineConfig.full() if args.preset == "full" else PipelineConfig.desk()
    return cfg.with_overrides(seed=args.seed, fusion_mode=getattr(args, "fusion_mode", None))


def _read_conformer(path: Path):
    try:
        return parse_conformer(path.read_bytes())
    except OSError as exc:
        raise SchemaError(f"{path}: {exc.strerror}") from None


def _threads() -> int:
    raw = os.environ.get("MOLGEOM_THREADS", "")
    try:
        return max(1, int(raw)) if raw else min(4, os.cpu_count() or 1)
    except ValueError:
        raise SchemaError(f"MOLGEOM_THREADS must be an integer, got {raw!r}") from None


def _batch(inputs: list[Path], work) -> int:
    """Run ``work(path)`` over inputs with bounded threads; report in sorted order."""
    def guarded(path):
        try:
            work(path)
            return None
        except (MolgeomError, OSError) as exc:
            return exc

    with ThreadPoolExecutor(max_workers=_threads()) as pool:
        results = list(pool.map(guarded, inputs))
    code = EXIT_OK
    for path, exc in zip(inputs, results):
        if exc is not None:
            print(f"error: {path.name}: {exc}", file=sys.stderr)
            code = code or getattr(exc, "exit_code", EXIT_INPUT)
    return code


def _molecule_inputs(src: Path) -> list[Path]:
    return sorted(src.glob("*.json")) if src.is_dir() else [src]


def _out_path(src: Path, out: Path | None, suffix: str, batch: bool) -> Path | None:
    if not batch:
        return out
    out.mkdir(parents=True, exist_ok=True)
    return out / (src.stem + suffix)


def cmd_fingerprint(args) -> int:
    cfg = _config(args)
    src, out = Path(args.input), Path(args.out) if args.out else None
    batch = src.is_dir()
    if batch and out is None:
        raise SchemaError("directory input needs --out DIR")

    def work(path):
        text = fingerprint(_read_conformer(path), cfg.e3fp).to_json()
        dest = _out_path(path, out, ".fp.json", batch)
        if dest is None:
            sys.stdout.write(text)
        else:
            dest.write_text(text, encoding="utf-8")

    if not batch:
        work(src)
        return EXIT_OK
    return _batch(_molecule_inputs(src), work)


def cmd_tokenize(args) -> int:
    cfg = _config(args)
    src, out = Path(args.input), Path(args.out)
    batch = src.is_dir()
    tables = pipeline.Tables.for_config(cfg)

    def work(path):
        seq = pipeline.structural_sequence(_read_conformer(path), cfg, tables)
        dest = _out_path(path, out, ".seq", batch)
        dest.write_bytes(seq.to_bytes())
        dest.with_name(dest.name + ".mask.json").write_text(seq.mask_json(), encoding="utf-8")

    if not batch:
        work(src)
        return EXIT_OK
    return _batch(_molecule_inputs(src), work)


def _image(args, cfg: PipelineConfig):
    if args.synthetic:
        return synthetic_image(cfg.encoder.img, cfg.seed)
    if not args.image:
        raise SchemaError("give an image path or --synthetic")
    try:
        return mio.load_image(args.image)
    except OSError as exc:
        raise SchemaError(f"{args.image}: {exc.strerror}") from None


def _print_trace(cfg: PipelineConfig, keys=None) -> None:
    for line in pipeline.shape_lines(cfg):
        if keys is None or line.split("=")[0] in keys:
            print(line)


def cmd_encode(args) -> int:
    cfg = _config(args)
    keys = ("N", "M", "H_local", "H_cmp", "H_global", "H_vis")
    _print_trace(cfg, keys)
    if args.shapes_only:
        return EXIT_OK
    if not args.out:
        raise SchemaError("encode needs --out")
    h_vis = DeepEncoder(cfg.encoder)(_image(args, cfg))
    Path(args.out).write_bytes(mio.dump_tensors({"H_vis": h_vis}))
    print(f"sha256={pipeline.checksum(h_vis)}")
    return EXIT_OK


def _load_h_vis(path) -> np.ndarray:
    try:
        blocks = mio.load_tensors(Path(path).read_bytes())
    except OSError as exc:
        raise SchemaError(f"{path}: {exc.strerror}") from None
    if "H_vis" not in blocks:
        raise SchemaError(f"{path}: checkpoint has no 'H_vis' block")
    return blocks["H_vis"]


def _write_fused(args, cfg, h_fused, decode_mode) -> None:
    Path(args.out).write_bytes(mio.dump_tensors({"H_fused": h_fused}))
    print(f"sha256={pipeline.checksum(h_fused)}")
    if decode_mode:
        ids = pipeline.decode(h_fused, cfg, decode_mode)
        doc = {"mode": decode_mode, "tokens": ids}
        text = json.dumps(doc, separators=(",", ":")) + "\n"
        Path(args.out + ".tokens.json").write_text(text, encoding="utf-8")
        print("tokens=" + " ".join(str(i) for i in ids))


def cmd_fuse(args) -> int:
    cfg = _config(args)
    h_vis = _load_h_vis(args.h_vis)
    seq = pipeline.structural_sequence(_read_conformer(Path(args.molecule)), cfg)
    _write_fused(args, cfg, pipeline.fuse(h_vis, seq, cfg), args.decode)
    return EXIT_OK


def cmd_pipeline(args) -> int:
    cfg = _config(args)
    _print_trace(cfg)
    if args.shapes_only:
        return EXIT_OK
    if not args.out:
        raise SchemaError("pipeline needs --out")
    c = _read_conformer(Path(args.molecule))
    h_fused = pipeline.run(_image(args, cfg), c, cfg)
    _write_fused(args, cfg, h_fused, args.decode)
    return EXIT_OK


def build_parser() -> argparse.ArgumentParser:
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--config", help="pipeline config JSON (default: desk preset)")
    common.add_argument("--preset", choices=("desk", "full"), default="desk")
    common.add_argument("--seed", type=int, help="override the config seed")

    parser = argparse.ArgumentParser(prog="molgeom", description=__doc__.splitlines()[0])
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("fingerprint", parents=[common], help="E3FP table for a conformer file or directory")
    p.add_argument("input")
    p.add_argument("--out", help="output file (directory in batch mode); stdout if omitted")
    p.set_defaults(func=cmd_fingerprint)

    p = sub.add_parser("tokenize", parents=[common], help="padded structural sequence plus mask sidecar")
    p.add_argument("input")
    p.add_argument("--out", required=True)
    p.add_argument("--fusion-mode", choices=FUSION_MODES)
    p.set_defaults(func=cmd_tokenize)

    p = sub.add_parser("encode", parents=[common], help="run the image encoder")
    p.add_argument("image", nargs="?")
    p.add_argument("--synthetic", action="store_true")
    p.add_argument("--shapes-only", action="store_true")
    p.add_argument("--out")
    p.set_defaults(func=cmd_encode)

    p = sub.add_parser("fuse", parents=[common], help="fuse an encoded image with a molecule")
    p.add_argument("h_vis", help="checkpoint written by 'encode'")
    p.add_argument("molecule")
    p.add_argument("--out", required=True)
    p.add_argument("--fusion-mode", choices=FUSION_MODES)
    p.add_argument("--decode", nargs="?", const="greedy", choices=DECODE_MODES)
    p.set_defaults(func=cmd_fuse)

    p = sub.add_parser("pipeline", parents=[common], help="image + molecule to fused tokens")
    p.add_argument("molecule", nargs="?")
    p.add_argument("--image")
    p.add_argument("--synthetic", action="store_true")
    p.add_argument("--shapes-only", action="store_true")
    p.add_argument("--out")
    p.add_argument("--fusion-mode", choices=FUSION_MODES)
    p.add_argument("--decode", nargs="?", const="greedy", choices=DECODE_MODES)
    p.set_defaults(func=cmd_pipeline)
    return parser


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    if args.command == "pipeline" and not args.shapes_only and not args.molecule:
        print("error: pipeline needs a molecule file", file=sys.stderr)
        return EXIT_INPUT
    try:
        return args.func(args)
    except (MolgeomError, OSError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return getattr(exc, "exit_code", EXIT_INPUT)


if __name__ == "__main__":
    sys.exit(main())
