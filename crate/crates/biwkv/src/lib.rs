//! Bidirectional WKV (Bi-WKV) linear attention.
//!
//! The operator computes, for every token `t` of a `T x C` key/value pair,
//! a positive-weight average of the values where the weight of token `i` is
//! `exp(-(|t - i| - 1)/T * w_c + k_i)` for `i != t` and `exp(u_c + k_t)` for
//! the token itself. `w` is a per-channel spatial decay (either sign) and
//! `u` a per-channel bonus for the current token.
//!
//! Two evaluation routes are provided:
//!
//! * [`biwkv_oracle`] — the direct `O(T^2 C)` double summation in `f64`.
//!   Slow, simple, and the reference every other route is checked against.
//! * [`biwkv_forward`] / [`biwkv_backward`] — the `O(TC)` recurrent form.
//!   Running sums over past and future tokens are carried as mantissas with
//!   a per-channel running max-exponent, so no intermediate exponential can
//!   overflow; every factor entering an update is `<= 1`.
//!
//! The recurrent route also exposes ablation switches ([`KernelOptions`])
//! that disable the `1/T` exponent bound and the max-subtraction trick, to
//! make the failure mode they prevent observable.

mod flops;
mod oracle;
mod real;
mod recurrent;
mod types;

pub use flops::flops_estimate;
pub use oracle::{biwkv_oracle, wkv_oracle_with};
pub use real::Real;
pub use recurrent::{
    biwkv_backward, biwkv_forward, wkv_forward_with, Directionality, KernelOptions, SavedContext,
    WkvOutput,
};
pub use types::{DecayParams, KernelError, KvSequence, WkvGradients};
