//! Rule-based noun phrase chunking over a small bundled word list.
//!
//! A caption is lowercased and cut into segments at punctuation. Inside a
//! segment, stopwords and known verbs break the token stream into runs; each
//! run is trimmed from the right until its last token is a known noun, and the
//! head noun is folded to its singular form with a naive `-s`/`-es` stemmer.

use std::collections::HashSet;
use std::sync::OnceLock;

const STOPWORDS: &[&str] = &[
    // articles and determiners
    "a", "an", "the", "this", "that", "these", "those", "some", "any", "each", "every", "all",
    "both", "either", "neither", "no", "another", "other", "such", "several", "many", "much",
    "few", "more", "most", "less", "least", "own", "same",
    // pronouns
    "i", "me", "my", "mine", "we", "us", "our", "ours", "you", "your", "yours", "he", "him",
    "his", "she", "her", "hers", "it", "its", "they", "them", "their", "theirs", "myself",
    "yourself", "himself", "herself", "itself", "ourselves", "themselves", "who", "whom",
    "whose", "which", "what", "there", "here",
    // prepositions
    "about", "above", "across", "after", "against", "along", "among", "around", "at", "before",
    "behind", "below", "beneath", "beside", "besides", "between", "beyond", "by", "down",
    "during", "for", "from", "in", "inside", "into", "near", "next", "of", "off", "on", "onto",
    "out", "outside", "over", "past", "through", "to", "toward", "towards", "under",
    "underneath", "up", "upon", "with", "within", "without", "via", "like",
    // conjunctions
    "and", "or", "but", "nor", "so", "yet", "while", "when", "where", "because", "if", "than",
    "then", "as", "though", "although",
    // numerals as words
    "zero", "one", "two", "three", "four", "five", "six", "seven", "eight", "nine", "ten",
    "eleven", "twelve", "twenty", "hundred", "thousand", "first", "second", "third", "dozen",
    // adverbs that never head a phrase
    "very", "too", "also", "just", "not", "only", "again", "still", "together",
];

const VERBS: &[&str] = &[
    "is", "are", "was", "were", "be", "been", "being", "am", "has", "have", "had", "having",
    "do", "does", "did", "can", "could", "will", "would", "shall", "should", "may", "might",
    "must", "feeds", "feed", "fed", "feeding", "sits", "sit", "sitting", "sat", "stands",
    "stand", "standing", "stood", "runs", "run", "running", "ran", "walks", "walk", "walking",
    "holds", "hold", "holding", "held", "eats", "eat", "eating", "ate", "plays", "play",
    "playing", "lies", "lie", "lying", "looks", "look", "looking", "rides", "ride", "riding",
    "flies", "fly", "flying", "swims", "swim", "swimming", "jumps", "jump", "jumping", "wears",
    "wear", "wearing", "carries", "carry", "carrying", "shows", "show", "showing", "shown",
    "sees", "see", "seen", "taken", "take", "takes", "taking", "makes", "make", "making",
    "appears", "appear", "placed", "lies", "drawn", "painted", "floats", "floating", "rests",
    "resting", "grazing", "grazes", "waits", "waiting", "parked", "watching", "watches",
    "crossing", "crosses", "covered", "filled", "made", "goes", "going", "went",
];

const NOUNS: &[&str] = &[
    // people
    "person", "people", "man", "men", "woman", "women", "boy", "girl", "child", "children",
    "baby", "kid", "player", "rider", "skier", "surfer", "chef", "family", "crowd", "friend",
    // animals
    "dog", "cat", "horse", "cow", "cattle", "sheep", "bird", "duck", "goose", "chicken",
    "butterfly", "moth", "bee", "fish", "salmon", "trout", "shark", "whale", "dolphin",
    "elephant", "giraffe", "zebra", "bear", "lion", "tiger", "monkey", "rabbit", "mouse",
    "squirrel", "deer", "fox", "wolf", "frog", "snake", "turtle", "owl", "eagle", "parrot",
    "pigeon", "puppy", "kitten",
    // vehicles
    "car", "truck", "bus", "bicycle", "bike", "motorcycle", "train", "boat", "ship", "airplane",
    "plane", "helicopter", "tractor", "van", "taxi", "scooter", "skateboard", "hoverboard",
    "rollerblade", "wagon", "cart",
    // household and objects
    "cup", "mug", "glass", "bottle", "plate", "bowl", "fork", "knife", "spoon", "chair",
    "table", "sofa", "couch", "bed", "lamp", "clock", "vase", "book", "phone", "laptop",
    "keyboard", "television", "tv", "remote", "bag", "backpack", "umbrella", "suitcase",
    "toothbrush", "scissors", "pen", "pencil", "box", "basket", "bucket", "kite", "ball",
    "frisbee", "racket", "bat", "glove", "hat", "cap", "shirt", "dress", "shoe", "boot",
    "heel", "stiletto", "sandal", "tie", "jacket", "coat", "sock", "window", "door", "wall",
    "floor", "roof", "fence", "sign", "bench", "bridge", "tower", "pagoda", "temple",
    "church", "house", "building", "street", "road", "sidewalk", "kitchen", "room", "toy",
    "doll", "candle", "mirror", "picture", "painting", "photo", "camera", "guitar", "piano",
    "drum", "flag", "balloon", "tent", "ladder", "rope", "wheel", "pedal", "engine",
    // food
    "apple", "pear", "banana", "orange", "lemon", "grape", "strawberry", "cherry", "peach",
    "pizza", "sandwich", "cake", "donut", "bread", "cheese", "egg", "carrot", "broccoli",
    "tomato", "potato", "salad", "soup", "coffee", "tea", "wine", "beer", "milk",
    // nature
    "tree", "flower", "grass", "leaf", "plant", "bush", "rock", "stone", "mountain", "hill",
    "river", "lake", "sea", "ocean", "beach", "sand", "snow", "sky", "cloud", "sun", "moon",
    "star", "field", "forest", "garden", "park", "water", "wave", "island", "desert", "valley",
    // shapes and patterns
    "circle", "square", "triangle", "ring", "cross", "diamond", "rectangle", "oval", "hexagon",
    "pentagon", "shape", "line", "dot", "spot", "stripe", "pattern", "background", "object",
    "thing", "scene", "image", "view",
];

fn set(words: &'static [&'static str]) -> HashSet<&'static str> {
    words.iter().copied().collect()
}

fn stopwords() -> &'static HashSet<&'static str> {
    static S: OnceLock<HashSet<&'static str>> = OnceLock::new();
    S.get_or_init(|| set(STOPWORDS))
}

fn verbs() -> &'static HashSet<&'static str> {
    static S: OnceLock<HashSet<&'static str>> = OnceLock::new();
    S.get_or_init(|| set(VERBS))
}

fn nouns() -> &'static HashSet<&'static str> {
    static S: OnceLock<HashSet<&'static str>> = OnceLock::new();
    S.get_or_init(|| set(NOUNS))
}

/// Singular form of `word` if it (or its `-es`/`-s` stem) is a known noun.
pub fn noun_lemma(word: &str) -> Option<&str> {
    let nouns = nouns();
    if nouns.contains(word) {
        return Some(word);
    }
    if let Some(stem) = word.strip_suffix("es") {
        if nouns.contains(stem) {
            return Some(stem);
        }
    }
    if let Some(stem) = word.strip_suffix('s') {
        if nouns.contains(stem) {
            return Some(stem);
        }
    }
    None
}

pub fn is_stopword(word: &str) -> bool {
    stopwords().contains(word)
}

fn is_word_char(c: char) -> bool {
    c.is_alphanumeric() || c == '\'' || c == '-'
}

/// Extracts lowercase noun phrases in order of first occurrence.
pub fn extract_noun_phrases(caption: &str) -> Vec<String> {
    let lower = caption.to_lowercase();
    let mut phrases: Vec<String> = Vec::new();
    for segment in lower.split(|c: char| !is_word_char(c) && !c.is_whitespace()) {
        let mut run: Vec<&str> = Vec::new();
        for token in segment.split_whitespace() {
            let token = token.trim_matches(|c| c == '\'' || c == '-');
            if token.is_empty() {
                continue;
            }
            if is_stopword(token) || verbs().contains(token) {
                flush_run(&mut run, &mut phrases);
            } else {
                run.push(token);
            }
        }
        flush_run(&mut run, &mut phrases);
    }
    phrases
}

fn flush_run(run: &mut Vec<&str>, phrases: &mut Vec<String>) {
    while let Some(last) = run.last() {
        if let Some(lemma) = noun_lemma(last) {
            let head = lemma.to_string();
            run.pop();
            let mut words: Vec<&str> = run.clone();
            words.push(&head);
            let phrase = words.join(" ");
            if !phrases.contains(&phrase) {
                phrases.push(phrase);
            }
            break;
        }
        run.pop();
    }
    run.clear();
}
