//! Model components: encoder, per-class radial-flow densities, classifier
//! head, and flat parameter bundles for federation.

mod bundle;
mod encoder;
mod flow;
mod head;
mod mixture;
mod network;

pub use bundle::{ParameterBundle, ShapeManifest};
pub use encoder::{Activation, Encoder, EncoderConfig, EncoderNodes};
pub use flow::{FlowNodes, RadialFlowStack};
pub use head::{ClassifierHead, HeadNodes};
pub use mixture::{ClassMixtureDensity, MixtureNodes};
pub use network::{params_mut, NetworkConfig, NetworkNodes, PosteriorNetwork};
