//! HTTP front door: classification, header fill-in, forwarding and relay.

pub mod envelope;
pub mod forward;
pub mod relay;
pub mod server;

pub use envelope::{classify_service, normalize_request, RequestEnvelope, UpstreamResponse, DEFAULT_USER_AGENT, GRAPHQL_PATH};
pub use forward::{Upstream, UpstreamTarget};
pub use relay::{aggregate_budget, relay_response, AggregateBudget, HEADER_PROXY_WORKER};
pub use server::{error_response, handle_client_request, proxy_router};
