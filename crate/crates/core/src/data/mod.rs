//! On-disk formats and datasets: the tensor file format, binary PPM images,
//! the synthetic tracklet generator and the directory-layout loader.

pub mod loader;
pub mod ppm;
pub mod synth;
pub mod tensor_file;

pub use loader::{load_dataset, DatasetIndex, SequenceRecord};
pub use ppm::{image_read, image_write};
pub use synth::synth_generate;
pub use tensor_file::{tensor_file_read, tensor_file_write};
