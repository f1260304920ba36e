//! Prompt construction for identity fine-tuning: caption an identity's image
//! sequence, bind the identity to a rare token, and produce the enhanced
//! prompt together with its token-free twin.

use std::collections::{BTreeMap, HashMap, HashSet};
use std::fmt;
use std::path::Path;
use std::str::FromStr;
use std::sync::{Arc, Mutex};

use rand::seq::SliceRandom;
use sha2::{Digest, Sha256};

use crate::error::{Error, IoContext, Result};
use crate::image::Image;
use crate::rng::{normal_vec, rng};
use crate::sprite::{layout, nearest_color, nearest_scene, PALETTE, SCENES};

pub const DEFAULT_TEMPLATE: &str = "a photo of {id}, {caption}";
const ID_SLOT: &str = "{id}";
const CAPTION_SLOT: &str = "{caption}";
/// The class noun that follows the identity token.
pub const CLASS_NOUN: &str = "person";

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct PromptBundle {
    /// Caption produced for the identity's image sequence.
    pub caption: String,
    pub iir_token: String,
    /// Prompt carrying the identity token, used to fine-tune and sample.
    pub enhanced_prompt: String,
    /// The same prompt with the identity token removed; conditions the
    /// reference set and the prior term.
    pub lpe_prompt: String,
}

impl PromptBundle {
    pub fn check_invariants(&self) -> Result<()> {
        let n = count_token(&self.enhanced_prompt, &self.iir_token);
        if n != 1 {
            return Err(Error::invalid(format!(
                "enhanced prompt holds identity token `{}` {n} times",
                self.iir_token
            )));
        }
        if count_token(&self.lpe_prompt, &self.iir_token) != 0 {
            return Err(Error::invalid(format!(
                "token-free prompt contains identity token `{}`",
                self.iir_token
            )));
        }
        if strip_token(&self.enhanced_prompt, &self.iir_token).as_deref() != Some(self.lpe_prompt.as_str()) {
            return Err(Error::invalid(
                "removing the identity token does not yield the token-free prompt",
            ));
        }
        Ok(())
    }
}

/// Removes the first whole-word `token ` from `text`.
fn strip_token(text: &str, token: &str) -> Option<String> {
    let needle = format!("{token} ");
    text.match_indices(&needle)
        .find(|(i, _)| !text[..*i].chars().next_back().is_some_and(char::is_alphanumeric))
        .map(|(i, _)| format!("{}{}", &text[..i], &text[i + needle.len()..]))
}

/// Lower-cased alphanumeric tokens, the unit a text encoder vocabulary sees.
pub fn tokenize(text: &str) -> impl Iterator<Item = String> + '_ {
    text.split(|c: char| !c.is_alphanumeric())
        .filter(|t| !t.is_empty())
        .map(str::to_lowercase)
}

fn count_token(text: &str, token: &str) -> usize {
    let token = token.to_lowercase();
    tokenize(text).filter(|t| *t == token).count()
}

/// A prompt template with exactly one `{id}` and one `{caption}` slot.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct PromptTemplate(String);

impl PromptTemplate {
    pub fn parse(text: &str) -> Result<Self> {
        let ids = text.matches(ID_SLOT).count();
        let caps = text.matches(CAPTION_SLOT).count();
        if ids != 1 || caps != 1 {
            return Err(Error::invalid(format!(
                "template needs one {ID_SLOT} and one {CAPTION_SLOT} slot, found {ids} and {caps}"
            )));
        }
        Ok(Self(text.to_string()))
    }

    pub fn as_str(&self) -> &str {
        &self.0
    }

    /// Fills both slots.
    pub fn fill(&self, identity: &str, caption: &str) -> String {
        // Fill the caption last so a caption containing `{id}` stays literal.
        let (before, after) = self.0.split_once(CAPTION_SLOT).unwrap();
        format!(
            "{}{caption}{}",
            before.replacen(ID_SLOT, identity, 1),
            after.replacen(ID_SLOT, identity, 1)
        )
    }
}

impl Default for PromptTemplate {
    fn default() -> Self {
        Self(DEFAULT_TEMPLATE.to_string())
    }
}

pub fn build_prompts(caption: &str, iir: &str, template: &PromptTemplate) -> Result<PromptBundle> {
    if iir.is_empty() || tokenize(iir).count() != 1 || tokenize(iir).next().unwrap() != iir.to_lowercase() {
        return Err(Error::invalid(format!("identity token `{iir}` must be a single word")));
    }
    let bundle = PromptBundle {
        caption: caption.to_string(),
        iir_token: iir.to_string(),
        enhanced_prompt: template.fill(&format!("{iir} {CLASS_NOUN}"), caption),
        lpe_prompt: template.fill(CLASS_NOUN, caption),
    };
    bundle.check_invariants()?;
    Ok(bundle)
}

// ---------------------------------------------------------------------------
// Captioning

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub enum AttributeSlot {
    Clothing,
    CarriedItems,
    Action,
    Scene,
}

impl AttributeSlot {
    pub const ALL: [AttributeSlot; 4] = [
        AttributeSlot::Clothing,
        AttributeSlot::CarriedItems,
        AttributeSlot::Action,
        AttributeSlot::Scene,
    ];

    /// Person attributes only; the background is left to vary.
    pub const PERSON: [AttributeSlot; 3] = [
        AttributeSlot::Clothing,
        AttributeSlot::CarriedItems,
        AttributeSlot::Action,
    ];
}

impl fmt::Display for AttributeSlot {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            AttributeSlot::Clothing => "clothing",
            AttributeSlot::CarriedItems => "carried_items",
            AttributeSlot::Action => "action",
            AttributeSlot::Scene => "scene",
        })
    }
}

impl FromStr for AttributeSlot {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        AttributeSlot::ALL
            .into_iter()
            .find(|a| a.to_string() == s)
            .ok_or_else(|| Error::invalid(format!("unknown attribute slot `{s}`")))
    }
}

/// External captioning model: encoded images in, UTF-8 text out.
pub trait CaptionAdapter: Send + Sync {
    fn caption(&self, images: &[Vec<u8>]) -> Result<String>;
}

pub const STUB_CAPTIONER: &str = "stub";

#[derive(Clone)]
pub struct CaptionerHandle {
    pub name: String,
    pub attribute_focus: Vec<AttributeSlot>,
    adapter: Option<Arc<dyn CaptionAdapter>>,
}

impl fmt::Debug for CaptionerHandle {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.debug_struct("CaptionerHandle")
            .field("name", &self.name)
            .field("attribute_focus", &self.attribute_focus)
            .field("adapter", &self.adapter.is_some())
            .finish()
    }
}

impl CaptionerHandle {
    /// Deterministic captioner that reads attribute slots off sprite layouts.
    pub fn stub() -> Self {
        Self {
            name: STUB_CAPTIONER.into(),
            attribute_focus: AttributeSlot::PERSON.to_vec(),
            adapter: None,
        }
    }

    /// A named external captioner. Without an attached adapter every call
    /// fails with a backend error.
    pub fn external(name: impl Into<String>, adapter: Option<Arc<dyn CaptionAdapter>>) -> Self {
        Self {
            name: name.into(),
            attribute_focus: AttributeSlot::PERSON.to_vec(),
            adapter,
        }
    }

    pub fn with_focus(mut self, focus: Vec<AttributeSlot>) -> Self {
        self.attribute_focus = focus;
        self
    }

    pub fn is_stub(&self) -> bool {
        self.name == STUB_CAPTIONER
    }
}

/// Slot values the stub captioner reads from one image.
pub fn stub_slot_values(image: &Image) -> BTreeMap<AttributeSlot, String> {
    let s = image.shape();
    let (h, w) = (s.height as f64, s.width as f64);
    let row = |f: f64| ((f * h) as usize).min(s.height - 1);
    let col = |f: f64| ((f * w) as usize).min(s.width - 1);
    let span = |lo: usize, hi: usize| (lo, hi.max(lo + 1));

    let (ty0, ty1) = span(row(layout::TORSO.0 + 0.04), row(layout::TORSO.1 - 0.04));
    let (tx0, tx1) = span(col(0.42), col(0.58));
    let torso = image.region_mean(ty0, ty1, tx0, tx1);
    let (bg_y0, bg_y1) = span(0, row(0.12));
    let (bg_x0, bg_x1) = span(0, col(0.15));
    let background = image.region_mean(bg_y0, bg_y1, bg_x0, bg_x1);
    let (by0, by1) = span(row(layout::BAG_ROWS.0 + 0.03), row(layout::BAG_ROWS.1 - 0.03));
    let (bx0, bx1) = span(col(layout::BAG_COLS.0 + 0.02), col(layout::BAG_COLS.1 - 0.02));
    let bag = image.region_mean(by0, by1, bx0, bx1);
    let (gy0, gy1) = span(row(layout::LEGS.0 + 0.1), row(layout::LEGS.1 - 0.05));
    let (gx0, gx1) = span(col(0.47), col(0.53));
    let gap = image.region_mean(gy0, gy1, gx0, gx1);

    let dist = |a: &[f64], b: &[f64]| -> f64 {
        a.iter().zip(b).map(|(x, y)| (x - y).powi(2)).sum::<f64>().sqrt()
    };

    let mut out = BTreeMap::new();
    out.insert(
        AttributeSlot::Clothing,
        format!("wearing {}", PALETTE[nearest_color(&torso).0].0),
    );
    let carried = if dist(&bag, &background) > 0.35 && dist(&bag, &torso) > 0.35 {
        format!("carrying a {} bag", PALETTE[nearest_color(&bag).0].0)
    } else {
        "carrying nothing".to_string()
    };
    out.insert(AttributeSlot::CarriedItems, carried);
    let action = if dist(&gap, &background) < dist(&gap, &torso).min(0.5) {
        "walking"
    } else {
        "standing"
    };
    out.insert(AttributeSlot::Action, action.to_string());
    out.insert(
        AttributeSlot::Scene,
        format!("in a {}", SCENES[nearest_scene(&background).0].0),
    );
    out
}

/// Per-slot majority vote; ties go to the value seen first in the sequence.
pub fn majority_slots(
    per_image: &[BTreeMap<AttributeSlot, String>],
    focus: &[AttributeSlot],
) -> Vec<(AttributeSlot, String)> {
    focus
        .iter()
        .filter_map(|slot| {
            let mut counts: Vec<(String, usize)> = Vec::new();
            for values in per_image {
                if let Some(v) = values.get(slot) {
                    match counts.iter_mut().find(|(k, _)| k == v) {
                        Some((_, n)) => *n += 1,
                        None => counts.push((v.clone(), 1)),
                    }
                }
            }
            // max_by_key keeps the last maximum; reverse so the earliest wins.
            counts
                .into_iter()
                .rev()
                .max_by_key(|(_, n)| *n)
                .map(|(v, _)| (*slot, v))
        })
        .collect()
}

pub fn caption_sequence(images: &[Image], captioner: &CaptionerHandle) -> Result<String> {
    if images.is_empty() {
        return Err(Error::invalid("cannot caption an empty image sequence"));
    }
    if captioner.is_stub() {
        let per_image: Vec<_> = images.iter().map(stub_slot_values).collect();
        let slots = majority_slots(&per_image, &captioner.attribute_focus);
        return Ok(slots
            .into_iter()
            .map(|(_, v)| v)
            .collect::<Vec<_>>()
            .join(", "));
    }
    let adapter = captioner.adapter.as_ref().ok_or_else(|| Error::Backend {
        name: captioner.name.clone(),
        message: "captioner backend unreachable (no adapter registered)".into(),
    })?;
    let encoded = images
        .iter()
        .map(Image::encode_pnm)
        .collect::<Result<Vec<_>>>()?;
    adapter.caption(&encoded).map_err(|e| match e {
        Error::Backend { .. } => e,
        other => Error::Backend {
            name: captioner.name.clone(),
            message: other.to_string(),
        },
    })
}

// ---------------------------------------------------------------------------
// Identity tokens

/// Returns the first candidate, after a seeded shuffle, that is absent from
/// the vocabulary.
pub fn allocate_iir(vocabulary: &HashSet<String>, candidates: &[String], seed: u64) -> Result<String> {
    allocate_excluding(vocabulary, &HashSet::new(), candidates, seed)
}

fn allocate_excluding(
    vocabulary: &HashSet<String>,
    used: &HashSet<String>,
    candidates: &[String],
    seed: u64,
) -> Result<String> {
    if candidates.is_empty() {
        return Err(Error::invalid("identity token candidate list is empty"));
    }
    let mut order: Vec<&String> = candidates.iter().collect();
    order.shuffle(&mut rng(seed));
    order
        .into_iter()
        .find(|c| !vocabulary.contains(c.as_str()) && !used.contains(c.as_str()))
        .cloned()
        .ok_or_else(|| {
            Error::Exhausted(format!(
                "all {} identity token candidates are in the vocabulary or taken",
                candidates.len()
            ))
        })
}

const CONSONANTS: &[u8] = b"bcdfghjklmnpqrstvwxz";
const VOWELS: &[u8] = b"aeiou";

/// The built-in list of 10,000 pronounceable rare strings: every
/// consonant-vowel-consonant word, then consonant-vowel-consonant-vowel
/// words in lexicographic order.
pub fn default_iir_candidates() -> Vec<String> {
    let mut out = Vec::with_capacity(10_000);
    for &a in CONSONANTS {
        for &b in VOWELS {
            for &c in CONSONANTS {
                out.push(String::from_utf8(vec![a, b, c]).unwrap());
            }
        }
    }
    'outer: for &a in CONSONANTS {
        for &b in VOWELS {
            for &c in CONSONANTS {
                for &d in VOWELS {
                    if out.len() == 10_000 {
                        break 'outer;
                    }
                    out.push(String::from_utf8(vec![a, b, c, d]).unwrap());
                }
            }
        }
    }
    out
}

/// One candidate per non-empty line.
pub fn load_iir_candidates(path: &Path) -> Result<Vec<String>> {
    let text = std::fs::read_to_string(path).at(path)?;
    let list: Vec<String> = text
        .lines()
        .map(str::trim)
        .filter(|l| !l.is_empty() && !l.starts_with('#'))
        .map(str::to_string)
        .collect();
    if list.is_empty() {
        return Err(Error::invalid(format!("{} lists no candidates", path.display())));
    }
    Ok(list)
}

const COMMON_WORDS: &str = "a an the of in on at to with and or for from by is are was be \
    person people man woman boy girl photo picture image wearing carrying walking standing \
    running sitting nothing bag backpack shirt top jacket coat pants jeans shorts skirt dress \
    shoes hat cap street park lobby night day road city campus building red green blue yellow \
    white black gray grey purple orange teal pink brown dark light big small tall short young old";

/// Words a generic text encoder certainly knows, plus the stub captioner's
/// own output vocabulary.
pub fn default_vocabulary() -> HashSet<String> {
    let mut v: HashSet<String> = COMMON_WORDS.split_whitespace().map(str::to_string).collect();
    v.extend(PALETTE.iter().map(|(n, _)| n.to_string()));
    v.extend(SCENES.iter().map(|(n, _)| n.to_string()));
    v
}

/// Shared identity-token allocator for one pipeline run. Each identity gets
/// one token, no token is handed out twice, and repeated requests for the
/// same identity return its existing token.
#[derive(Debug)]
pub struct IirRegistry {
    vocabulary: HashSet<String>,
    candidates: Vec<String>,
    state: Mutex<RegistryState>,
}

#[derive(Debug, Default)]
struct RegistryState {
    by_identity: HashMap<String, String>,
    taken: HashSet<String>,
}

impl IirRegistry {
    pub fn new(vocabulary: HashSet<String>, candidates: Vec<String>) -> Self {
        Self {
            vocabulary,
            candidates,
            state: Mutex::new(RegistryState::default()),
        }
    }

    pub fn allocate(&self, identity: &str, seed: u64) -> Result<String> {
        let mut st = self.state.lock().expect("registry lock poisoned");
        if let Some(tok) = st.by_identity.get(identity) {
            return Ok(tok.clone());
        }
        let tok = allocate_excluding(&self.vocabulary, &st.taken, &self.candidates, seed)?;
        st.taken.insert(tok.clone());
        st.by_identity.insert(identity.to_string(), tok.clone());
        Ok(tok)
    }

    /// Records a token restored from a cache. Fails if another identity
    /// already holds it.
    pub fn restore(&self, identity: &str, token: &str) -> Result<()> {
        let mut st = self.state.lock().expect("registry lock poisoned");
        match st.by_identity.get(identity) {
            Some(t) if t == token => return Ok(()),
            Some(t) => {
                return Err(Error::Integrity(format!(
                    "identity `{identity}` already holds token `{t}`, cache says `{token}`"
                )))
            }
            None => {}
        }
        if st.taken.contains(token) {
            return Err(Error::Integrity(format!("token `{token}` is already taken")));
        }
        st.taken.insert(token.to_string());
        st.by_identity.insert(identity.to_string(), token.to_string());
        Ok(())
    }

    pub fn assignments(&self) -> BTreeMap<String, String> {
        let st = self.state.lock().expect("registry lock poisoned");
        st.by_identity.iter().map(|(k, v)| (k.clone(), v.clone())).collect()
    }
}

// ---------------------------------------------------------------------------
// Text conditions

/// Hashes a prompt into a unit-norm condition vector: the normalised sum of
/// per-token pseudo-random Gaussian vectors seeded by SHA-256 of the token.
pub fn embed_prompt(text: &str, dim: usize) -> Vec<f64> {
    let mut v = vec![0.0; dim];
    for tok in tokenize(text) {
        let d = Sha256::digest(tok.as_bytes());
        let seed = u64::from_le_bytes(d[..8].try_into().unwrap());
        for (acc, x) in v.iter_mut().zip(normal_vec(&mut rng(seed), dim)) {
            *acc += x;
        }
    }
    crate::nn::l2_normalize(&mut v);
    v
}
