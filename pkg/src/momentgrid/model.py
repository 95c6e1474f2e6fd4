"""Full network assembly: parameters, forward pass, ablation wiring."""

from __future__ import annotations

import numpy as np

from . import autodiff as ad
from . import comparison, interaction, refine
from .coattention import (
    attend_query,
    attend_video,
    fuse_query_to_video,
    fuse_video_to_query,
)
from .encoders import encode_query, encode_video, sample_video
from .grid import CandidateGrid, boundary_map, build_grid, content_map
from .params import (
    ParamStore,
    add_affine,
    add_batch_norm,
    add_conv1d,
    add_conv2d_grouped,
    add_embedding,
    add_gru,
)


class MomentRetrievalModel:
    """Scores every valid block of the T x T candidate grid for one query.

    Ablation wiring: `use_fine_interaction=False` drops the reread encoders
    and the gated interaction (the aligned map becomes Concat(content,
    boundary)); `comparison_blocks=0` drops the comparison stack entirely.
    """

    def __init__(self, config, seed=0, embedding_init=None):
        config.validate()
        self.config = config
        self.store = ParamStore()
        self._grid_template = build_grid(config.T, float(config.T), config.scheme)
        rng = np.random.default_rng(seed)
        self._build(rng, embedding_init)

    # -- construction -------------------------------------------------------

    def _build(self, rng, embedding_init):
        cfg, store = self.config, self.store
        C, half = cfg.C, cfg.C // 2
        add_embedding(store, rng, "embed", cfg.vocab_size, cfg.word_dim,
                      init=embedding_init)
        add_affine(store, rng, "video_in", cfg.D_v, C)
        for k in range(cfg.gru_layers):
            for d in ("fw", "bw"):
                add_gru(store, rng, f"video_gru.l{k}.{d}", C, half)
        for k in range(cfg.gru_layers):
            input_size = cfg.word_dim if k == 0 else C
            for d in ("fw", "bw"):
                add_gru(store, rng, f"query_gru.l{k}.{d}", input_size, half)
        add_affine(store, rng, "coattn.query_score", C, 1)
        if cfg.use_fine_interaction:
            add_affine(store, rng, "coattn.video_score", C, 1)
            add_affine(store, rng, "refine_video.ffn1", C, C)
            add_affine(store, rng, "refine_video.ffn2", C, C)
            for k in cfg.ngram_kernels:
                add_conv1d(store, rng, f"refine_query.conv{k}", k, C, C)
            add_affine(store, rng, "refine_query.merge", len(cfg.ngram_kernels) * C, C)
            add_affine(store, rng, "interaction.query_proj", C, C)
            add_affine(store, rng, "interaction.video_proj", C, C)
        add_affine(store, rng, "fuse.main", 4 * C, C)
        add_affine(store, rng, "fuse.skip", 2 * C, C)
        cg = C // cfg.groups
        for k in range(cfg.comparison_blocks):
            add_conv2d_grouped(store, rng, f"compare.b{k}.conv", cfg.groups,
                               cfg.kernel, cg, cg)
            add_batch_norm(store, f"compare.b{k}.bn", C)
        add_affine(store, rng, "rank", C, 1)

    # -- helpers --------------------------------------------------------------

    def grid_for(self, duration):
        """Candidate grid with this model's validity mask and real time scale."""
        return CandidateGrid(
            T=self.config.T,
            valid=self._grid_template.valid,
            tau=duration / self.config.T,
        )

    @property
    def grid(self):
        return self._grid_template

    def param_count(self):
        return self.store.n_params()

    # -- forward ---------------------------------------------------------------

    def forward(self, feats, token_ids, token_mask, training=False,
                update_stats=False, want_maps=False):
        """Score a batch.

        feats: (B, T_V, D_v); token_ids: (B, L) int; token_mask: (B, L) bool.
        Returns scores (B, T, T) as a Tensor, or (scores, intermediates dict)
        when want_maps is set.
        """
        cfg, store, grid = self.config, self.store, self._grid_template

        sampled = sample_video(np.asarray(feats, dtype=np.float64), store, cfg.T)
        v_bar = encode_video(sampled, store, cfg.gru_layers, cfg.C)
        tok_vecs = ad.embedding(store["embed"], np.asarray(token_ids))
        q_bar = encode_query(tok_vecs, token_mask, store, cfg.gru_layers, cfg.C)

        _, q_attn = attend_query(q_bar, token_mask, store)
        v_hat = fuse_query_to_video(v_bar, q_attn)

        a_c = content_map(v_hat, grid)
        a_b = boundary_map(v_hat, grid)
        if cfg.map_mode == "content":
            cmap, bmap = a_c, a_c
        elif cfg.map_mode == "boundary":
            cmap, bmap = a_b, a_b
        else:
            cmap, bmap = a_c, a_b

        if cfg.use_fine_interaction:
            _, v_attn = attend_video(v_bar, store)
            q_hat = fuse_video_to_query(q_bar, token_mask, v_attn)
            v_tilde = refine.refine_video(v_hat, store)
            q_tilde = refine.refine_query(q_hat, token_mask, store,
                                          kernels=cfg.ngram_kernels)
            a1 = interaction.query_branch(q_tilde, token_mask, bmap, cmap,
                                          store, grid)
            a2 = interaction.video_branch(v_tilde, bmap, cmap, store, grid)
            a_bar = interaction.align(a1, a2)
        else:
            a_bar = interaction.align(cmap, bmap)

        a_hat = comparison.fuse(a_bar, bmap, cmap, store, grid)
        a_tilde = comparison.compare(a_hat, grid, store, cfg.comparison_blocks,
                                     cfg.groups, cfg.padding, training,
                                     update_stats)
        scores = comparison.rank(a_tilde, grid, store)
        if want_maps:
            return scores, {"content": a_c, "boundary": a_b, "scores": scores}
        return scores
