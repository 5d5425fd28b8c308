"""Query/key twin encoders with an exponential-moving-average key side."""
import copy

import torch
import torch.nn.functional as F
from torch import nn

from .encoder import StageEncoder, StageEncoderConfig, prediction_spec, projection_head, projection_spec
from .errors import ShapeMismatch


class MomentumPair(nn.Module):
    """Query branch: encoder -> projector -> predictor.  Key branch: EMA encoder -> EMA projector.

    Key-side parameters never require grad; they only move through
    :meth:`ema_update`.
    """

    def __init__(self, encoder_config=None, dim=256, hidden=256, m=0.99,
                 projector_spec=None, predictor_spec=None):
        super().__init__()
        if not 0.0 <= m < 1.0:
            raise ValueError(f"momentum must be in [0, 1), got {m}")
        self.m = m
        self.encoder = StageEncoder(encoder_config or StageEncoderConfig())
        feat = self.encoder.config.feature_dim
        self.projector = projection_head(projector_spec or projection_spec(feat, hidden, dim))
        self.predictor = projection_head(predictor_spec or prediction_spec(dim, hidden))
        self.key_encoder = copy.deepcopy(self.encoder)
        self.key_projector = copy.deepcopy(self.projector)
        for p in self.key_parameters():
            p.requires_grad_(False)

    def query_parameters(self):
        """Parameters updated by the optimizer (theta_q)."""
        for module in (self.encoder, self.projector, self.predictor):
            yield from module.parameters()

    def paired_parameters(self):
        """(query, key) parameter pairs for the encoder+projector subset."""
        for q_mod, k_mod in ((self.encoder, self.key_encoder), (self.projector, self.key_projector)):
            q_named = dict(q_mod.named_parameters())
            for name, p_k in k_mod.named_parameters():
                p_q = q_named.get(name)
                if p_q is None or p_q.shape != p_k.shape:
                    raise ShapeMismatch(f"key parameter {name} has no matching query parameter")
                yield p_q, p_k

    def key_parameters(self):
        for module in (self.key_encoder, self.key_projector):
            yield from module.parameters()

    @torch.no_grad()
    def ema_update(self, m=None):
        """theta_k <- m * theta_k + (1 - m) * theta_q, elementwise."""
        m = self.m if m is None else m
        for p_q, p_k in self.paired_parameters():
            p_k.mul_(m).add_(p_q.detach(), alpha=1.0 - m)
        return self

    def query(self, images):
        return F.normalize(self.predictor(self.projector(self.encoder(images))), dim=1)

    @torch.no_grad()
    def key(self, images):
        return F.normalize(self.key_projector(self.key_encoder(images)), dim=1)

    def embed_views(self, view_a, view_b, originals=None):
        """Return (queries_a, queries_b, keys_a, keys_b, original_keys).

        With ``originals=None`` the augmented view A stands in for the originals.
        """
        if view_a.shape != view_b.shape or (originals is not None and originals.shape != view_a.shape):
            raise ShapeMismatch("views and originals must have the same shape")
        n = view_a.shape[0]
        queries = self.query(torch.cat([view_a, view_b]))
        parts = [view_a, view_b] if originals is None else [view_a, view_b, originals]
        keys = self.key(torch.cat(parts))
        original_keys = keys[:n] if originals is None else keys[2 * n:]
        return queries[:n], queries[n:], keys[:n], keys[n:2 * n], original_keys
