//! Feature aggregation and enhancement blocks.
//!
//! - [`SaBlock`]: spatial attention. A 1×1 Conv+BN+ReLU collapses `x` to a
//!   single channel `U`, a fully connected layer over the flattened `H·W`
//!   positions followed by a sigmoid gives a gate `S`, and the output is
//!   `Z[c,h,w] = Y[c,h,w] · S[h,w]`.
//! - [`SeBlock`]: squeeze-and-excitation channel recalibration.
//! - [`SfeBlock`]: two pre-activation residual bottlenecks with a dilation-2
//!   middle conv; the second applies SE to its residual branch.
//! - [`DfeBlock`]: a dual-path unit carrying an additive residual state and a
//!   concatenative dense state.
//! - [`Fam`]: fuses the stride-8 and stride-16 maps through lateral convs,
//!   resampling, SA gating and concatenation.

mod dfe;
mod fam;
mod sa;
mod se;
mod sfe;

pub use dfe::{DfeBlock, DfeConfig, DfeState};
pub use fam::{Fam, FamConfig, FamVariant};
pub use sa::SaBlock;
pub use se::SeBlock;
pub use sfe::{ResidualUnit, SfeBlock, SfeConfig};

use crate::error::Result;
use crate::nn::{Forward, Mode, ParamStore};
use crate::tensor::gradcheck::{grad_check, probe_loss, GradCheckOptions, GradCheckReport};
use crate::tensor::{Tensor, Var};

/// Gradient-checks a module: `inputs` come first, then every trainable
/// parameter in `store` (bound by name). The loss is a fixed random
/// projection of the module output. Batch norm runs in training mode.
pub fn grad_check_module<F>(
    store: &ParamStore,
    inputs: Vec<(String, Tensor)>,
    forward: F,
    opts: &GradCheckOptions,
) -> Result<GradCheckReport>
where
    F: Fn(&mut Forward<'_, '_>, &[Var]) -> Result<Var> + Sync,
{
    let n_inputs = inputs.len();
    let ids: Vec<_> = store.trainable().collect();
    let mut all = inputs;
    all.extend(ids.iter().map(|&id| (store.name(id).to_string(), store.get(id).clone())));
    let seed = opts.seed;
    grad_check(
        &all,
        |g, vars| {
            let mut f = Forward::new(g, store, Mode::Train);
            for (&id, &v) in ids.iter().zip(&vars[n_inputs..]) {
                f.bind(id, v);
            }
            let out = forward(&mut f, &vars[..n_inputs])?;
            probe_loss(f.graph, out, seed)
        },
        opts,
    )
}
