"""Python bindings for the Markov autoregressive transformer core."""

from ._core import (
    BOS,
    EOS,
    PAD,
    UNK,
    ConfigError,
    DimensionError,
    Error,
    FormatError,
    InputError,
    Model,
    ModelConfig,
    NumericError,
    audit_leakage,
    beam_decode,
    corpus_bleu,
    count_decode_ops,
    gen_synthetic,
    greedy_decode,
    incremental_logits,
    load_checkpoint,
    mode_positions,
    run_cli,
    teacher_forced_logits,
)


def tiny_config(variant="MAT", order=2, vocab=11, **overrides):
    """A small model config for experiments and tests."""
    c = ModelConfig()
    c.variant = variant
    c.order = order
    c.enc_layers = 1
    c.dec_layers = 2
    c.heads = 2
    c.d_model = 8
    c.d_ff = 16
    c.src_vocab = c.tgt_vocab = vocab
    c.max_len = 32
    c.dropout = 0.0
    for key, value in overrides.items():
        if not hasattr(c, key):
            raise AttributeError(f"ModelConfig has no field {key!r}")
        setattr(c, key, value)
    return c
