"""End-to-end composition: image and conformer in, fused tokens (and text ids) out."""

from __future__ import annotations

import hashlib
from dataclasses import dataclass

import numpy as np

from molgeom.config import PipelineConfig
from molgeom.decoder import (
    DecoderParams,
    PromptTokens,
    greedy_decode,
    initial_state,
    sample_decode,
)
from molgeom.deepencoder import DeepEncoder, shape_trace
from molgeom.e3fp import fingerprint
from molgeom.errors import SchemaError
from molgeom.molgraph import Conformer, align_phi, parse_selfies
from molgeom.projector import ProjectorParams, concat_baseline, projector_forward
from molgeom.structok import (
    EmbeddingTable,
    StructuralSequence,
    default_selfies_vocab,
    fuse_sequence,
    no3d_sequence,
)


def _dims(shape) -> str:
    return "x".join(str(n) for n in shape)


def shape_lines(cfg: PipelineConfig) -> list[str]:
    """Audit trace computed from the config alone."""
    trace = shape_trace(cfg.encoder)
    n_v = trace["H_vis"][0]
    return [
        f"N={cfg.encoder.n_tokens}",
        f"M={cfg.encoder.m_tokens}",
        f"H_local={_dims(trace['H_local'])}",
        f"H_cmp={_dims(trace['H_cmp'])}",
        f"H_global={_dims(trace['H_global'])}",
        f"H_vis={_dims(trace['H_vis'])}",
        f"S_pad={cfg.l_max}x{cfg.d_s}",
        f"H_fused={n_v}x{cfg.projector.d_h}",
    ]


def checksum(arr: np.ndarray) -> str:
    a = np.ascontiguousarray(arr, dtype="<f4")
    return hashlib.sha256(a.tobytes()).hexdigest()


@dataclass(frozen=True, eq=False)
class Tables:
    e1d: EmbeddingTable
    e3d: EmbeddingTable

    @classmethod
    def for_config(cls, cfg: PipelineConfig) -> Tables:
        return cls(
            EmbeddingTable.for_vocab(default_selfies_vocab(), cfg.d_s, cfg.seed, "e1d"),
            EmbeddingTable(cfg.e3fp.vocab_size, cfg.d_s, cfg.seed, "e3d"),
        )


def structural_sequence(c: Conformer, cfg: PipelineConfig, tables: Tables | None = None) -> StructuralSequence:
    if c.selfies is None:
        raise SchemaError("conformer document has no 'selfies' field")
    tables = tables or Tables.for_config(cfg)
    st, graph = parse_selfies(c.selfies)
    align_phi(st, c, graph)
    if cfg.fusion_mode == "no3d":
        return no3d_sequence(st, tables.e1d, cfg.l_max)
    return fuse_sequence(st, fingerprint(c, cfg.e3fp), tables.e1d, tables.e3d, cfg.l_max)


def fuse(h_vis: np.ndarray, seq: StructuralSequence, cfg: PipelineConfig,
         params: ProjectorParams | None = None) -> np.ndarray:  # fmt: skip
    params = params or ProjectorParams.init(cfg.projector)
    if cfg.fusion_mode == "concat":
        return concat_baseline(h_vis, seq, params)
    return projector_forward(h_vis, seq, params)


def decode(h_fused: np.ndarray, cfg: PipelineConfig, mode: str = "greedy") -> list[int]:
    params = DecoderParams.init(cfg.decoder)
    prompt = PromptTokens(cfg.decode.prompt, cfg.decoder.vocab_size)
    state = initial_state(h_fused.astype(np.float64), prompt, params)
    d = cfg.decode
    if mode == "greedy":
        return greedy_decode(state, params, d.t_max, d.stop_id)
    if mode == "sample":
        return sample_decode(state, params, d.t_max, cfg.seed, d.temperature, d.stop_id)
    raise SchemaError(f"unknown decode mode {mode!r}")


def run(img: np.ndarray, c: Conformer, cfg: PipelineConfig) -> np.ndarray:
    h_vis = DeepEncoder(cfg.encoder)(img)
    return fuse(h_vis, structural_sequence(c, cfg), cfg)
