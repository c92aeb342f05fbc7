//! Dataset storage, splitting, episode sampling, SR pools and base-set
//! partitioning.

mod episode;
mod partition;
mod store;

pub use episode::{
    decode_episodes, encode_episodes, presample_episodes, read_episode_file, sample_episode, write_episode_file,
    EpisodeFile, EpisodeSpec,
};
pub use partition::{partition_base, partition_indices, sample_sr_batch, sample_sr_indices, BasePartition, SrPool};
pub use store::{
    decode_dataset, encode_dataset, generate_synthetic, import_csv, load_dataset, parse_csv_dataset, save_dataset,
    split_dataset, DatasetStore, Split, SyntheticConfig, DATASET_MAGIC, DATASET_VERSION,
};
