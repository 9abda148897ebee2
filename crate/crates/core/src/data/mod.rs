//! Synthetic long-tailed multi-label data, archive formats, few-shot episodes.

mod archive;
mod episodes;
mod synthetic;
mod teacher_file;

pub use archive::{load_dataset, read_dataset, save_dataset, write_dataset, DATASET_MAGIC, DATASET_VERSION};
pub use episodes::{sample_episodes, Episode, EpisodeSpec};
pub use synthetic::{class_stats, default_profile, generate, Dataset, GeneratorSpec, Placement, Sample, TEST_ID_OFFSET};
pub use teacher_file::{
    read_teacher_embeddings, read_teacher_file, write_teacher_embeddings, write_teacher_file, TeacherTable,
    TEACHER_MAGIC, TEACHER_VERSION,
};
