//! Classical post-processing between satellite and ground station: sifting,
//! LDPC reconciliation, finite-key sizing, privacy amplification and the
//! authenticated frame protocol that carries them.

pub mod auth;
pub mod channel;
pub mod frame;
pub mod ground;
pub mod ldpc;
pub mod messages;
pub mod privacy;
pub mod satellite;
pub mod session;
pub mod sifting;

pub use channel::{ChannelParams, Outage};
pub use session::{run_session, ProtocolConfig, SessionOutcome, SessionReport, SessionSetup};
