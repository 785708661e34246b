use crate::data::vocab::{BOS_ID, CLS_ID, EOS_ID, SEP_ID};
use crate::data::{DialogueSample, TextSample};
use crate::error::{Error, Result};

const OPEN: f64 = 0.0;
const BLOCKED: f64 = f64::NEG_INFINITY;

/// Additive n×n self-attention mask; entries are 0 (attend) or −∞ (blocked).
#[derive(Debug, Clone, PartialEq)]
pub struct AttentionMask {
    n: usize,
    data: Vec<f64>,
}

impl AttentionMask {
    /// Dialogue mask: source↔source fully open, target→source open,
    /// target→target causal, source→target fully blocked.
    pub fn dialogue(n_source: usize, n_target: usize) -> Self {
        let n = n_source + n_target;
        let mut data = vec![BLOCKED; n * n];
        for i in 0..n {
            for j in 0..n {
                let open = if i < n_source {
                    j < n_source
                } else {
                    j < n_source || j <= i
                };
                if open {
                    data[i * n + j] = OPEN;
                }
            }
        }
        AttentionMask { n, data }
    }

    pub fn bidirectional(n: usize) -> Self {
        AttentionMask {
            n,
            data: vec![OPEN; n * n],
        }
    }

    pub fn causal(n: usize) -> Self {
        let mut data = vec![BLOCKED; n * n];
        for i in 0..n {
            for j in 0..=i {
                data[i * n + j] = OPEN;
            }
        }
        AttentionMask { n, data }
    }

    /// Arbitrary visibility pattern; entries must be 0 or −∞ and every row
    /// must keep at least one open entry.
    pub fn from_raw(n: usize, data: Vec<f64>) -> Result<Self> {
        if data.len() != n * n {
            return Err(Error::Data(format!(
                "mask data has {} entries, expected {}",
                data.len(),
                n * n
            )));
        }
        let mask = AttentionMask { n, data };
        mask.validate()?;
        Ok(mask)
    }

    pub fn n(&self) -> usize {
        self.n
    }

    pub fn data(&self) -> &[f64] {
        &self.data
    }

    pub fn allowed(&self, i: usize, j: usize) -> bool {
        self.data[i * self.n + j] == OPEN
    }

    /// Every row must keep at least one open entry and entries must be
    /// exactly 0 or −∞.
    pub fn validate(&self) -> Result<()> {
        for (k, &v) in self.data.iter().enumerate() {
            if v != OPEN && v != BLOCKED {
                return Err(Error::Data(format!(
                    "mask entry {k} is {v}, expected 0 or -inf"
                )));
            }
        }
        for i in 0..self.n {
            if (0..self.n).all(|j| !self.allowed(i, j)) {
                return Err(Error::Data(format!("mask row {i} is fully blocked")));
            }
        }
        Ok(())
    }

    /// Character grid for human inspection: '.' open, '#' blocked. A source
    /// boundary, when given, is drawn as a separator between the blocks.
    pub fn render(&self, boundary: Option<usize>) -> String {
        let mut out = String::new();
        for i in 0..self.n {
            if boundary == Some(i) {
                out.push_str(&"-".repeat(self.n + boundary.map(|_| 1).unwrap_or(0)));
                out.push('\n');
            }
            for j in 0..self.n {
                if boundary == Some(j) {
                    out.push('|');
                }
                out.push(if self.allowed(i, j) { '.' } else { '#' });
            }
            out.push('\n');
        }
        out
    }
}

/// Which self-attention regime a packed text sample uses.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum TextAttention {
    Bidirectional,
    LeftToRight,
}

/// One packed sample: token/position/type annotations, its attention mask
/// and the condition driving the condition-aware blocks (None means the
/// unconditioned zero-bias path).
#[derive(Debug, Clone)]
pub struct InputEncoding {
    pub token_ids: Vec<u32>,
    pub position_ids: Vec<usize>,
    pub type_ids: Vec<u8>,
    pub mask: AttentionMask,
    pub condition_id: Option<u32>,
    /// Number of source-side positions (0 for text samples).
    pub n_source: usize,
}

impl InputEncoding {
    pub fn len(&self) -> usize {
        self.token_ids.len()
    }

    pub fn is_empty(&self) -> bool {
        self.token_ids.is_empty()
    }

    pub fn validate(&self) -> Result<()> {
        let n = self.token_ids.len();
        if self.position_ids.len() != n || self.type_ids.len() != n || self.mask.n() != n {
            return Err(Error::Data("inconsistent encoding lengths".into()));
        }
        if self.type_ids.windows(2).any(|w| w[0] > w[1]) {
            return Err(Error::Data("type ids must be non-decreasing".into()));
        }
        self.mask.validate()
    }
}

/// Build the source block `[CLS] u_1 [SEP] … u_k [SEP]` within `budget`
/// tokens, truncating from the oldest utterance first (then from the oldest
/// tokens of the sole remaining utterance).
pub fn pack_source_block(history: &[Vec<u32>], budget: usize) -> Result<Vec<u32>> {
    if history.is_empty() {
        return Err(Error::Data("dialogue history must be non-empty".into()));
    }
    if budget < 3 {
        return Err(Error::Data(format!(
            "source budget of {budget} tokens cannot hold [CLS] token [SEP]"
        )));
    }
    let mut kept: Vec<&[u32]> = history.iter().map(|u| u.as_slice()).collect();
    let mut src_len = 1 + kept.iter().map(|u| u.len() + 1).sum::<usize>();
    while src_len > budget && kept.len() > 1 {
        let dropped = kept.remove(0);
        src_len -= dropped.len() + 1;
    }
    let mut trimmed_first: &[u32] = kept[0];
    if src_len > budget {
        let overflow = src_len - budget;
        if overflow >= trimmed_first.len() {
            return Err(Error::Data(format!(
                "source budget of {budget} tokens leaves no room for history"
            )));
        }
        trimmed_first = &trimmed_first[overflow..];
    }
    let mut tokens = Vec::with_capacity(budget.min(src_len));
    tokens.push(CLS_ID);
    for (i, u) in kept.iter().enumerate() {
        if i == 0 {
            tokens.extend_from_slice(trimmed_first);
        } else {
            tokens.extend_from_slice(u);
        }
        tokens.push(SEP_ID);
    }
    Ok(tokens)
}

/// Pack a dialogue sample as `[CLS] u_1 [SEP] … u_k [SEP] [BOS] response [EOS]`
/// under the dialogue mask. Oversized histories are truncated from the oldest
/// utterance first; a response that cannot fit on its own is rejected.
pub fn pack_dialogue(sample: &DialogueSample, max_length: usize) -> Result<InputEncoding> {
    let target_len = sample.response.len() + 2;
    // Minimal source block is [CLS] token [SEP].
    if target_len + 3 > max_length {
        return Err(Error::Data(format!(
            "response of {} tokens exceeds the packing budget (max_length {max_length})",
            sample.response.len()
        )));
    }
    let mut token_ids = pack_source_block(&sample.history, max_length - target_len)?;
    let n_source = token_ids.len();
    token_ids.push(BOS_ID);
    token_ids.extend_from_slice(&sample.response);
    token_ids.push(EOS_ID);

    let n = token_ids.len();
    debug_assert!(n <= max_length);
    let type_ids = (0..n).map(|i| u8::from(i >= n_source)).collect();
    Ok(InputEncoding {
        position_ids: (0..n).collect(),
        type_ids,
        mask: AttentionMask::dialogue(n_source, n - n_source),
        condition_id: Some(sample.condition_id),
        n_source,
        token_ids,
    })
}

/// Pack a text sample as `[BOS] text [EOS]`, all target-side, under either a
/// bidirectional or a strictly causal mask. Overlong text is tail-truncated.
pub fn pack_text(
    sample: &TextSample,
    attn: TextAttention,
    max_length: usize,
) -> Result<InputEncoding> {
    if max_length < 3 {
        return Err(Error::Config(format!(
            "max_length {max_length} too small to pack text"
        )));
    }
    let body = if sample.text.len() + 2 > max_length {
        &sample.text[..max_length - 2]
    } else {
        &sample.text[..]
    };
    let mut token_ids = Vec::with_capacity(body.len() + 2);
    token_ids.push(BOS_ID);
    token_ids.extend_from_slice(body);
    token_ids.push(EOS_ID);
    let n = token_ids.len();
    let mask = match attn {
        TextAttention::Bidirectional => AttentionMask::bidirectional(n),
        TextAttention::LeftToRight => AttentionMask::causal(n),
    };
    Ok(InputEncoding {
        position_ids: (0..n).collect(),
        type_ids: vec![1; n],
        mask,
        condition_id: Some(sample.condition_id),
        n_source: 0,
        token_ids,
    })
}

/// Recover (history utterances, response) from a packed dialogue encoding.
/// Only meaningful before MLM masking.
pub fn unpack_dialogue(enc: &InputEncoding) -> (Vec<Vec<u32>>, Vec<u32>) {
    let src = &enc.token_ids[1..enc.n_source];
    let mut history = Vec::new();
    let mut cur = Vec::new();
    for &tok in src {
        if tok == SEP_ID {
            history.push(std::mem::take(&mut cur));
        } else {
            cur.push(tok);
        }
    }
    let response = enc.token_ids[enc.n_source + 1..enc.len() - 1].to_vec();
    (history, response)
}

pub fn unpack_text(enc: &InputEncoding) -> Vec<u32> {
    enc.token_ids[1..enc.len() - 1].to_vec()
}
