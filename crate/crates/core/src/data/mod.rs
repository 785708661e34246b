//! Corpus ingestion, vocabulary, packing, attention masks, MLM masking and
//! the mixed dialogue/text batch sampler.

mod corpus;
mod masking;
mod pack;
mod sampler;
mod tfidf;
mod vocab;

pub use corpus::{
    load_dialogue_records, load_dialogue_records_lenient, load_text_records, write_jsonl,
    ConditionMap, Corpus, DialogueRecord, DialogueSample, TextRecord, TextSample,
};
pub use masking::{apply_random_masking, apply_tfidf_masking, MaskStyle, MaskedSample, SampleKind};
pub use pack::{
    pack_dialogue, pack_source_block, pack_text, unpack_dialogue, unpack_text, AttentionMask,
    InputEncoding, TextAttention,
};
pub use sampler::{Batch, BatchSampler, SamplerConfig, TextMasking};
pub use tfidf::TfIdfTable;
pub use vocab::{
    Vocabulary, BOS_ID, CLS_ID, EOS_ID, MASK_ID, NUM_RESERVED, PAD_ID, RESERVED_TOKENS, SEP_ID,
    UNK_ID,
};
