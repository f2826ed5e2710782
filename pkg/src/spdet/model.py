"""Full model assembly: stub backbone, text encoders, bidirectional
enhancer, and detection head, with one stable parameter namespace."""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

from .backbone import StubEncoderWeights, image_stub_encoder, init_stub_encoder
from .config import Config
from .detect import HeadWeights, head_forward, init_head
from .encoders import (
    DbpEncoderWeights,
    ScpEncoderWeights,
    Vocabulary,
    encode_dbp,
    encode_scp,
    init_dbp_encoder,
    init_scp_encoder,
)
from .enhancer import (
    MODALITY_DBP,
    EnhancerWeights,
    TextEmbedding,
    enhance,
    init_enhancer,
)
from .nn import gauss_param, named_parameters
from .prompts import mine_report
from .tensor import Tensor


@dataclass
class SpDetWeights:
    backbone: StubEncoderWeights
    enhancer: EnhancerWeights
    scp: ScpEncoderWeights
    dbp: DbpEncoderWeights
    head: HeadWeights
    null_dbp: Tensor  # fusion stand-in when a report yields no beacons
    log_tau: Tensor = None  # present only when the temperature is learnable


class SpDetModel:
    def __init__(self, config: Config, vocab: Vocabulary, rng=None):
        config.validate()
        rng = rng or np.random.default_rng(config.seed)
        self.config = config
        self.vocab = vocab
        g = config.grid_high
        self.weights = SpDetWeights(
            backbone=init_stub_encoder(
                rng, channels=(config.stub_c1, config.stub_c2),
                d_low=config.d_l, d_high=config.d_h,
            ),
            enhancer=init_enhancer(
                rng, g, g, config.d_h, config.d_t, config.d_shared, config.d_shared,
                heads=config.heads, depth=config.depth, fusion_order=config.fusion_order,
            ),
            scp=init_scp_encoder(
                rng, vocab.size, config.max_len, config.d_t, heads=config.scp_heads
            ),
            dbp=init_dbp_encoder(rng, vocab.size, config.d_shared),
            head=init_head(
                rng, config.d_l + config.d_h, config.d_shared, config.dfl_bins
            ),
            null_dbp=gauss_param(rng, (1, config.d_shared), 0.02),
            log_tau=(
                Tensor(np.array(math.log(config.temperature)), requires_grad=True)
                if config.temperature_learnable
                else None
            ),
        )

    def named_parameters(self):
        return dict(named_parameters(self.weights, "model"))

    @property
    def temperature(self):
        if self.weights.log_tau is not None:
            return float(np.exp(self.weights.log_tau.data))
        return self.config.temperature

    def class_anchors(self, texts):
        return encode_dbp(texts, self.weights.dbp, self.vocab)

    def beacon_texts(self, report_text):
        """Positive beacon phrases mined from the report, deduplicated in
        sentence order; the disease-beacon fusion input."""
        _, beacons = mine_report(report_text)
        seen = set()
        texts = []
        for b in beacons:
            if b.role == "positive-prompt" and b.phrase.text not in seen:
                seen.add(b.phrase.text)
                texts.append(b.phrase.text)
        return texts

    def forward(self, image, report_text, anchors, beacon_texts=None):
        """Run image + report through fusion and the head.

        ``anchors`` is the ClassEmbedding to classify against; pass the
        encoded class names at eval time. ``beacon_texts`` defaults to the
        phrases mined from the report itself.
        """
        from .prompts import postprocess_report

        pyramid = image_stub_encoder(
            image if isinstance(image, Tensor) else Tensor(image), self.weights.backbone
        )
        scp_emb = encode_scp(postprocess_report(report_text), self.weights.scp, self.vocab)
        if beacon_texts is None:
            beacon_texts = self.beacon_texts(report_text)
        if beacon_texts:
            dbp_matrix = encode_dbp(beacon_texts, self.weights.dbp, self.vocab).matrix
        else:
            dbp_matrix = self.weights.null_dbp
        dbp_emb = TextEmbedding(embedding=dbp_matrix, modality=MODALITY_DBP)
        x_final = enhance(pyramid, scp_emb, dbp_emb, self.weights.enhancer)
        return head_forward(x_final, anchors, self.weights.head, self.config.dfl_bins)

    def set_gates(self, scp=None, dbp=None):
        """Overwrite fusion gates; used by the eval-time prompt ablations."""
        for layer in self.weights.enhancer.layers:
            if scp is not None:
                layer.scp.gate.data[...] = scp
            if dbp is not None:
                layer.dbp.gate.data[...] = dbp
