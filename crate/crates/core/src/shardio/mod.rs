//! Dataset records (JSON lines) and embedding matrices (little-endian binary).

mod embeddings;
mod records;

pub use embeddings::{
    read_embeddings, write_embeddings, EmbeddingError, EmbeddingMatrix, EMBEDDING_MAGIC, HEADER_LEN,
};
pub use records::{
    open_records, read_records, write_records, Flag, ImageTextRecord, LineError, LineErrorKind,
    RecordError, RecordReader, ShardContents, ShardError, ShardWriter, PARTIAL_SENTINEL,
};
