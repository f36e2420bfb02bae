//! Dataset records, the toy tokenizer, tag stoplisting and the synthetic world.

mod dataset;
mod stoplist;
mod vocab;
pub mod world;

pub use dataset::{
    dedup_preserving_order, load_dataset, parse_dataset, read_jsonl, sample_from_value, write_jsonl, VqaSample,
    NUM_ANSWERS,
};
pub use stoplist::{
    build_tag_stoplist, filter_tags, load_stoplist, tag_document_frequency, tag_stats, TagStats,
    DEFAULT_STOPLIST_FRACTION,
};
pub use vocab::{join_words, normalize_text, split_words, Vocab, BOS, EOS, PAD, UNK};
pub use world::{ClueConfig, SampleTruth, SynthWorld, VqgTriple, WorldConfig};
