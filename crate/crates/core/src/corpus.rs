//! Deterministic synthetic English-like text.
//!
//! Used as the bundled training corpus so experiments need no downloads.
//! Sentences come from a small grammar over a fixed lexicon, grouped into
//! paragraphs, with the usual punctuation and whitespace tokens.

use crate::rng::Rng;

const NAMES: &[&str] = &[
    "Ada", "Bram", "Celia", "Dmitri", "Elena", "Farid", "Greta", "Hugo", "Iris", "Jonas", "Keiko", "Luis",
];
const NOUNS: &[&str] = &[
    "river", "garden", "machine", "letter", "village", "engine", "window", "market", "teacher", "lantern",
    "bridge", "forest", "kitchen", "harbor", "library", "signal", "painter", "station", "mountain", "orchard",
    "clock", "question", "story", "storm", "road", "farmer", "ship", "song", "table", "winter",
];
const VERBS: &[(&str, &str)] = &[
    ("watches", "watched"),
    ("builds", "built"),
    ("finds", "found"),
    ("carries", "carried"),
    ("repairs", "repaired"),
    ("follows", "followed"),
    ("remembers", "remembered"),
    ("paints", "painted"),
    ("opens", "opened"),
    ("crosses", "crossed"),
    ("measures", "measured"),
    ("answers", "answered"),
];
const ADJECTIVES: &[&str] = &[
    "old", "quiet", "bright", "narrow", "heavy", "small", "distant", "careful", "green", "broken", "warm", "strange",
];
const ADVERBS: &[&str] = &["slowly", "again", "early", "carefully", "quietly", "often", "never", "today"];
const PLACES: &[&str] = &["near the river", "after the storm", "in the morning", "behind the station", "during winter"];
const CONNECTIVES: &[&str] = &["and", "but", "because", "while", "so"];

fn pick<'a>(rng: &mut Rng, xs: &[&'a str]) -> &'a str {
    xs[rng.below(xs.len() as u64) as usize]
}

fn noun_phrase(rng: &mut Rng) -> String {
    if rng.below(5) == 0 {
        return pick(rng, NAMES).to_string();
    }
    let det = if rng.below(2) == 0 { "the" } else { "a" };
    if rng.below(3) == 0 {
        format!("{det} {} {}", pick(rng, ADJECTIVES), pick(rng, NOUNS))
    } else {
        format!("{det} {}", pick(rng, NOUNS))
    }
}

fn clause(rng: &mut Rng, past: bool) -> String {
    let (present, past_form) = VERBS[rng.below(VERBS.len() as u64) as usize];
    let verb = if past { past_form } else { present };
    let mut s = format!("{} {verb} {}", noun_phrase(rng), noun_phrase(rng));
    match rng.below(6) {
        0 => {
            s.push(' ');
            s.push_str(pick(rng, ADVERBS));
        }
        1 => {
            s.push(' ');
            s.push_str(pick(rng, PLACES));
        }
        _ => {}
    }
    s
}

fn capitalize(s: &str) -> String {
    let mut c = s.chars();
    match c.next() {
        Some(f) => f.to_uppercase().chain(c).collect(),
        None => String::new(),
    }
}

fn sentence(rng: &mut Rng) -> String {
    let past = rng.below(2) == 0;
    let body = match rng.below(5) {
        0 | 1 => clause(rng, past),
        2 => format!("{}, {} {}", clause(rng, past), pick(rng, CONNECTIVES), clause(rng, past)),
        3 => format!("{}: {}", clause(rng, past), clause(rng, past)),
        _ => {
            let q = clause(rng, false);
            return format!("Why {}?", q);
        }
    };
    let end = if rng.below(8) == 0 { "!" } else { "." };
    format!("{}{end}", capitalize(&body))
}

/// Generates at least `min_bytes` of text, deterministically in `seed`.
pub fn synthetic_text(seed: u64, min_bytes: usize) -> String {
    let mut rng = Rng::new(seed);
    let mut out = String::with_capacity(min_bytes + 256);
    while out.len() < min_bytes {
        let sentences = 2 + rng.below(5);
        for i in 0..sentences {
            if i > 0 {
                out.push(' ');
            }
            out.push_str(&sentence(&mut rng));
        }
        out.push_str("\n\n");
    }
    out
}
