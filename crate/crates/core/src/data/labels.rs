use rayon::prelude::*;

use crate::error::Result;
use crate::hfpi::{fp_hfpi_solve, HfpiConfig};
use crate::rsbnn::LabelPair;

use super::channel::Dataset;
use super::io::{BeamLabels, DualLabels, LabelKey};

/// Solver labels for a whole dataset.
#[derive(Debug, Clone, PartialEq)]
pub struct LabelSet {
    pub duals: DualLabels,
    pub beams: BeamLabels,
    /// Samples whose solve failed or did not converge.
    pub excluded: usize,
}

/// Runs FP-HFPI on every sample in parallel.  A sample whose solve errors
/// or hits `max_outer` gets no label.
pub fn generate_labels(dataset: &Dataset, hcfg: &HfpiConfig) -> Result<LabelSet> {
    hcfg.validate()?;
    let cfg = dataset.system_config()?;
    let solved: Vec<Option<(LabelPair, _)>> = dataset
        .samples
        .par_iter()
        .map(|s| match fp_hfpi_solve(&cfg, s, hcfg) {
            Ok(sol) if sol.diagnostics.converged => Some((
                LabelPair {
                    first: sol.first_duals,
                    last: sol.final_duals,
                },
                sol.beams,
            )),
            _ => None,
        })
        .collect();
    let excluded = solved.iter().filter(|s| s.is_none()).count();
    let (duals, beams) = solved.into_iter().map(|s| s.unzip()).unzip();
    let key = LabelKey::of(dataset);
    Ok(LabelSet {
        duals: DualLabels { key, labels: duals },
        beams: BeamLabels { key, beams },
        excluded,
    })
}
