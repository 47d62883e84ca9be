//! On-disk formats shared by the engine and the feature exporter.

mod manifest;
mod tensor_file;

pub use manifest::{DatasetManifest, FrameEntry, MapEntry};
pub use tensor_file::{
    decode_tensor, encode_tensor, header_len, read_tensor, write_tensor, TensorMeta, TensorRecord,
    DTYPE_F32_LE, FORMAT_VERSION, MAGIC, MAX_RANK,
};
