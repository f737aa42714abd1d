//! Criterion benchmark harness for the sigmoid-attn kernels; see
//! `benches/attention.rs`. The statistics-grade sweep with FLOP accounting
//! lives in `sigmoid_attn::bench` and the `sigmoid-attn bench` subcommand.
