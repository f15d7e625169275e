//! Multi-level grouped mixture-of-experts: per-token routed feedforward
//! experts (grouped by task), and whole-sequence experts (copy / zero /
//! noise / feature) fed by a latent-query resampler.

pub mod providers;
pub mod resampler;
pub mod sequence;
pub mod token;

pub use providers::{AttributeHistogramProvider, FeatureProvider, HashProjectionProvider, ProviderRegistry, SampleHandle};
pub use resampler::{noise_embedding, Resampler, ResamplerConfig};
pub use sequence::{ResamplerCache, SeqCond, SequenceExpertKind, SequenceMoeLayer};
pub use token::{route_tokens, Routing, TokenMoeGroupConfig, TokenMoeLayer};
