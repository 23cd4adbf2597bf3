//! Dictionary-free noun extraction used to build simplified entity captions.

/// Extracts noun entities from a caption, in order of appearance.
pub trait NounTagger {
    fn nouns(&self, text: &str) -> Vec<String>;
}

impl<F> NounTagger for F
where
    F: Fn(&str) -> Vec<String>,
{
    fn nouns(&self, text: &str) -> Vec<String> {
        self(text)
    }
}

/// Stopword list plus suffix rules. Words are lowercased; anything that is a
/// function word, a known adjective, a common caption verb, a number, or has
/// an adverb/participle/adjective suffix is dropped. `-ing` words survive only
/// right after a determiner or adjective ("a tall building").
#[derive(Debug, Clone, Copy, Default)]
pub struct HeuristicTagger;

const DETERMINERS: &[&str] = &[
    "a", "an", "the", "this", "that", "these", "those", "some", "any", "each", "every", "its",
    "his", "her", "their", "our", "my", "your", "one", "two", "three", "four", "five", "several",
    "many", "few", "another", "other",
];

const STOPWORDS: &[&str] = &[
    // pronouns
    "i",
    "you",
    "he",
    "she",
    "it",
    "we",
    "they",
    "me",
    "him",
    "them",
    "us",
    "who",
    "whom",
    "which",
    "what",
    "where",
    "when",
    "while",
    "there",
    "here",
    "itself",
    "themselves",
    // prepositions and conjunctions
    "and",
    "or",
    "but",
    "nor",
    "so",
    "yet",
    "of",
    "in",
    "on",
    "at",
    "by",
    "for",
    "with",
    "without",
    "from",
    "to",
    "into",
    "onto",
    "over",
    "under",
    "near",
    "next",
    "beside",
    "behind",
    "between",
    "above",
    "below",
    "across",
    "along",
    "around",
    "through",
    "against",
    "among",
    "up",
    "down",
    "off",
    "out",
    "as",
    "like",
    "than",
    "about",
    "inside",
    "outside",
    "atop",
    "beneath",
    "upon",
    "towards",
    "toward",
    "during",
    "after",
    "before",
    "front",
    "top",
    "within",
    // auxiliaries and common caption verbs
    "is",
    "are",
    "was",
    "were",
    "be",
    "been",
    "being",
    "has",
    "have",
    "had",
    "do",
    "does",
    "did",
    "can",
    "could",
    "will",
    "would",
    "should",
    "may",
    "might",
    "must",
    "sits",
    "stands",
    "holds",
    "shows",
    "features",
    "lies",
    "looks",
    "wears",
    "rests",
    "hangs",
    "appears",
    "contains",
    "displays",
    "depicts",
    "captures",
    "sit",
    "stand",
    "hold",
    "show",
    "lie",
    "look",
    "wear",
    // adverbs and misc
    "not",
    "no",
    "very",
    "too",
    "also",
    "just",
    "only",
    "all",
    "both",
    "more",
    "most",
    "such",
    "own",
    "same",
    "then",
    "now",
    "well",
    "together",
    "other",
    "s",
];

const ADJECTIVES: &[&str] = &[
    "red",
    "white",
    "black",
    "blue",
    "green",
    "yellow",
    "orange",
    "purple",
    "pink",
    "brown",
    "gray",
    "grey",
    "golden",
    "silver",
    "beige",
    "dark",
    "bright",
    "pale",
    "colorful",
    "small",
    "large",
    "big",
    "tall",
    "short",
    "long",
    "little",
    "tiny",
    "huge",
    "giant",
    "wide",
    "narrow",
    "old",
    "new",
    "young",
    "ancient",
    "modern",
    "vintage",
    "beautiful",
    "pretty",
    "delicate",
    "elegant",
    "cute",
    "happy",
    "sad",
    "wooden",
    "metal",
    "plastic",
    "clear",
    "empty",
    "full",
    "busy",
    "quiet",
    "sunny",
    "cloudy",
    "snowy",
    "rainy",
    "wet",
    "dry",
    "hot",
    "cold",
    "warm",
    "fresh",
    "open",
    "closed",
    "round",
    "square",
    "flat",
    "thin",
    "thick",
    "soft",
    "hard",
    "smooth",
    "rough",
    "clean",
    "dirty",
    "high",
    "low",
    "deep",
    "light",
    "heavy",
    "simple",
    "various",
    "different",
    "single",
    "double",
    "multiple",
    "close",
    "far",
    "main",
    "natural",
    "traditional",
    "urban",
    "rural",
    "lush",
    "scenic",
    "cozy",
    "shiny",
    "striped",
    "floral",
];

const NON_NOUN_SUFFIXES: &[&str] = &[
    "ly", "ed", "ous", "ful", "ive", "less", "able", "ible", "ish", "est",
];

fn is_modifier(word: &str) -> bool {
    DETERMINERS.contains(&word) || ADJECTIVES.contains(&word)
}

impl NounTagger for HeuristicTagger {
    fn nouns(&self, text: &str) -> Vec<String> {
        let tokens: Vec<String> = text
            .split(|c: char| !(c.is_alphanumeric() || c == '\'' || c == '-'))
            .map(|t| {
                let t = t.trim_matches(|c| c == '\'' || c == '-').to_lowercase();
                t.strip_suffix("'s").map(str::to_string).unwrap_or(t)
            })
            .filter(|t| !t.is_empty())
            .collect();

        let mut out = Vec::new();
        for (i, word) in tokens.iter().enumerate() {
            let w = word.as_str();
            if w.chars().count() < 3
                || w.chars().any(|c| c.is_ascii_digit())
                || DETERMINERS.contains(&w)
                || STOPWORDS.contains(&w)
                || ADJECTIVES.contains(&w)
            {
                continue;
            }
            if w.ends_with("ing") {
                let after_modifier = i > 0 && is_modifier(&tokens[i - 1]);
                if !after_modifier {
                    continue;
                }
            } else if NON_NOUN_SUFFIXES.iter().any(|s| w.ends_with(s)) {
                continue;
            }
            out.push(word.clone());
        }
        out
    }
}
