//! Channel generation, label generation, file formats, the dense black-box
//! baseline and the benchmark harness.

pub mod bench;
pub mod blackbox;
pub mod channel;
pub mod io;
pub mod labels;

pub use bench::{append_csv, benchmark, read_csv, run_scheme, BenchRow, Scheme};
pub use blackbox::{load_blackbox, read_blackbox, save_blackbox, write_blackbox, BlackboxModel};
pub use channel::{generate_channels, large_scale_gain, ChannelParams, Dataset, DatasetHeader};
pub use io::{
    flatten_beams, load_beam_labels, load_dataset, load_dual_labels, read_beam_labels, read_dataset, read_dual_labels,
    save_beam_labels, save_dataset, save_dual_labels, unflatten_beams, write_beam_labels, write_dataset,
    write_dual_labels, BeamLabels, DualLabels, LabelKey,
};
pub use labels::{generate_labels, LabelSet};

#[cfg(test)]
mod tests;
