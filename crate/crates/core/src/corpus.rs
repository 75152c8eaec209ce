//! Corpus ingestion, the built-in synthetic corpus, and seeded window batching.

use std::path::Path;

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::error::{Error, Result};
use crate::tokenizer::{self, EOS};

/// A flat sequence of token ids.
#[derive(Clone, Debug, Default, PartialEq, Eq)]
pub struct TokenStream {
    tokens: Vec<u32>,
}

impl TokenStream {
    pub fn new(tokens: Vec<u32>) -> Self {
        Self { tokens }
    }

    pub fn from_bytes(bytes: &[u8]) -> Self {
        Self::new(tokenizer::encode(bytes))
    }

    /// Concatenate files, separating documents with EOS.
    pub fn from_files<P: AsRef<Path>>(paths: &[P]) -> Result<Self> {
        if paths.is_empty() {
            return Err(Error::Empty("corpus file list"));
        }
        let mut tokens = Vec::new();
        for (i, p) in paths.iter().enumerate() {
            if i > 0 {
                tokens.push(EOS);
            }
            tokens.extend(tokenizer::encode(&std::fs::read(p)?));
        }
        Ok(Self::new(tokens))
    }

    pub fn tokens(&self) -> &[u32] {
        &self.tokens
    }

    pub fn len(&self) -> usize {
        self.tokens.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tokens.is_empty()
    }

    pub fn iter(&self) -> impl Iterator<Item = u32> + '_ {
        self.tokens.iter().copied()
    }

    /// Split into `(head, tail)` with `tail` holding roughly `fraction` of the tokens.
    pub fn split_tail(&self, fraction: f64) -> (Self, Self) {
        let cut = ((1.0 - fraction) * self.tokens.len() as f64).round() as usize;
        let cut = cut.min(self.tokens.len());
        (
            Self::new(self.tokens[..cut].to_vec()),
            Self::new(self.tokens[cut..].to_vec()),
        )
    }

    pub fn truncated(&self, max_tokens: usize) -> Self {
        Self::new(self.tokens[..max_tokens.min(self.tokens.len())].to_vec())
    }

    /// `count` windows of `len` tokens drawn at seeded random offsets.
    pub fn sample_windows(&self, count: usize, len: usize, seed: u64) -> Result<Vec<Vec<u32>>> {
        if len == 0 || self.tokens.len() < len {
            return Err(Error::Invalid(format!(
                "stream of {} tokens cannot supply windows of {len}",
                self.tokens.len()
            )));
        }
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        Ok((0..count)
            .map(|_| {
                let start = rng.random_range(0..=self.tokens.len() - len);
                self.tokens[start..start + len].to_vec()
            })
            .collect())
    }
}

/// Batches of `(inputs, targets)` from non-overlapping windows, shuffled per epoch.
pub struct WindowSampler<'a> {
    tokens: &'a [u32],
    seq_len: usize,
    order: Vec<usize>,
    cursor: usize,
    epoch: u64,
    seed: u64,
}

impl<'a> WindowSampler<'a> {
    pub fn new(stream: &'a TokenStream, seq_len: usize, seed: u64) -> Result<Self> {
        if seq_len == 0 || stream.len() < seq_len + 1 {
            return Err(Error::Invalid(format!(
                "corpus of {} tokens too short for windows of {seq_len}",
                stream.len()
            )));
        }
        let mut s = Self {
            tokens: stream.tokens(),
            seq_len,
            order: Vec::new(),
            cursor: 0,
            epoch: 0,
            seed,
        };
        s.reshuffle();
        Ok(s)
    }

    pub fn n_windows(&self) -> usize {
        (self.tokens.len() - 1) / self.seq_len
    }

    pub fn epoch(&self) -> u64 {
        self.epoch
    }

    fn reshuffle(&mut self) {
        let mut rng = ChaCha8Rng::seed_from_u64(self.seed ^ self.epoch.wrapping_mul(0x9E37_79B9_7F4A_7C15));
        self.order = (0..self.n_windows()).collect();
        self.order.shuffle(&mut rng);
        self.cursor = 0;
    }

    /// Flattened `[batch × seq_len]` inputs and next-token targets.
    pub fn next_batch(&mut self, batch: usize) -> (Vec<u32>, Vec<u32>) {
        let mut inputs = Vec::with_capacity(batch * self.seq_len);
        let mut targets = Vec::with_capacity(batch * self.seq_len);
        for _ in 0..batch {
            if self.cursor == self.order.len() {
                self.epoch += 1;
                log::info!(
                    "corpus exhausted after {} windows; reshuffling for epoch {}",
                    self.order.len(),
                    self.epoch
                );
                self.reshuffle();
            }
            let start = self.order[self.cursor] * self.seq_len;
            self.cursor += 1;
            inputs.extend_from_slice(&self.tokens[start..start + self.seq_len]);
            targets.extend_from_slice(&self.tokens[start + 1..start + self.seq_len + 1]);
        }
        (inputs, targets)
    }
}

/// A prompt with its exact expected completion (without the trailing newline).
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct TaskInstance {
    pub prompt: Vec<u8>,
    pub answer: Vec<u8>,
}

pub mod synthetic {
    //! A seeded generator of English-like paragraphs with recurring
    //! characters, pronoun and number agreement, mixed with short
    //! completion tasks (`add 12+30=42`, `copy abc>abc`).
    //!
    //! Characters come from a fixed population whose attributes (town, job,
    //! age, pet, colour) never change, so every seed states the same facts
    //! and held-out text can be predicted only by a model that memorized them.

    use std::sync::OnceLock;

    use super::*;

    const WORLD_SEED: u64 = 0x776f_726c_64;
    const N_PEOPLE: usize = 400;
    const N_TOWNS: usize = 48;
    const ONSETS: &[&str] = &["b", "d", "f", "g", "k", "l", "m", "n", "p", "r", "s", "t", "v", "z", "br", "tr"];
    const VOWELS: &[&str] = &["a", "e", "i", "o", "u", "ai", "ou"];
    const CODAS: &[&str] = &["", "", "", "n", "r", "s", "l", "m"];
    const COLOURS: &[&str] = &["red", "green", "blue", "brown", "yellow", "white", "black", "grey", "orange", "purple"];
    const JOBS: &[&str] = &[
        "baker", "farmer", "painter", "sailor", "doctor", "teacher", "builder", "singer", "tailor",
        "miner", "cook", "driver", "guard", "weaver", "potter", "hunter", "writer", "nurse",
    ];

    const NOUNS: &[(&str, &str)] = &[
        ("dog", "dogs"), ("cat", "cats"), ("house", "houses"), ("tree", "trees"),
        ("river", "rivers"), ("book", "books"), ("apple", "apples"), ("boat", "boats"),
        ("child", "children"), ("friend", "friends"), ("garden", "gardens"), ("road", "roads"),
        ("window", "windows"), ("letter", "letters"), ("stone", "stones"), ("bird", "birds"),
        ("horse", "horses"), ("table", "tables"), ("lamp", "lamps"), ("key", "keys"),
        ("box", "boxes"), ("song", "songs"), ("flower", "flowers"), ("mouse", "mice"),
        ("teacher", "teachers"), ("farmer", "farmers"), ("story", "stories"), ("city", "cities"),
        ("bridge", "bridges"), ("coat", "coats"), ("cup", "cups"), ("door", "doors"),
    ];
    const VERBS: &[(&str, &str, &str)] = &[
        ("see", "sees", "saw"), ("find", "finds", "found"), ("carry", "carries", "carried"),
        ("paint", "paints", "painted"), ("watch", "watches", "watched"), ("open", "opens", "opened"),
        ("follow", "follows", "followed"), ("build", "builds", "built"), ("clean", "cleans", "cleaned"),
        ("bring", "brings", "brought"), ("sell", "sells", "sold"), ("move", "moves", "moved"),
        ("visit", "visits", "visited"), ("hide", "hides", "hid"), ("fix", "fixes", "fixed"),
        ("draw", "draws", "drew"), ("lose", "loses", "lost"), ("keep", "keeps", "kept"),
    ];
    const ADJS: &[&str] = &[
        "small", "large", "old", "new", "red", "green", "quiet", "bright", "heavy", "happy",
        "tired", "strange", "warm", "cold", "clever", "brown", "yellow", "empty", "busy", "gentle",
    ];
    const PLACES: &[&str] = &[
        "market", "school", "forest", "harbor", "village", "library", "station", "kitchen",
        "hill", "beach", "farm", "park",
    ];
    const TIMES: &[&str] = &["morning", "evening", "day", "week", "night", "winter", "summer"];
    const NUMBERS: &[&str] = &[
        "one", "two", "three", "four", "five", "six", "seven", "eight", "nine", "ten",
    ];

    fn zipf<'a, T>(rng: &mut ChaCha8Rng, items: &'a [T]) -> &'a T {
        let total: f64 = (1..=items.len()).map(|r| 1.0 / r as f64).sum();
        let mut u = rng.random::<f64>() * total;
        for (r, item) in items.iter().enumerate() {
            u -= 1.0 / (r + 1) as f64;
            if u <= 0.0 {
                return item;
            }
        }
        items.last().unwrap()
    }

    struct Person {
        name: String,
        female: bool,
        town: usize,
        job: usize,
        age: u32,
        pet: usize,
        pet_name: String,
        colour: usize,
    }

    struct World {
        people: Vec<Person>,
        towns: Vec<String>,
    }

    fn word(rng: &mut ChaCha8Rng, syllables: usize) -> String {
        let mut w = String::new();
        for _ in 0..syllables {
            w.push_str(ONSETS[rng.random_range(0..ONSETS.len())]);
            w.push_str(VOWELS[rng.random_range(0..VOWELS.len())]);
        }
        w.push_str(CODAS[rng.random_range(0..CODAS.len())]);
        w
    }

    fn unique_words(rng: &mut ChaCha8Rng, n: usize, seen: &mut std::collections::HashSet<String>) -> Vec<String> {
        let mut out = Vec::with_capacity(n);
        while out.len() < n {
            let syllables = rng.random_range(2..4);
            let w = capitalize(&word(rng, syllables));
            if seen.insert(w.clone()) {
                out.push(w);
            }
        }
        out
    }

    fn world() -> &'static World {
        static WORLD: OnceLock<World> = OnceLock::new();
        WORLD.get_or_init(|| {
            let mut rng = ChaCha8Rng::seed_from_u64(WORLD_SEED);
            let mut seen = std::collections::HashSet::new();
            let towns = unique_words(&mut rng, N_TOWNS, &mut seen);
            let names = unique_words(&mut rng, N_PEOPLE, &mut seen);
            let pet_names = unique_words(&mut rng, N_PEOPLE, &mut seen);
            let people = names
                .into_iter()
                .zip(pet_names)
                .map(|(name, pet_name)| Person {
                    name,
                    female: rng.random_bool(0.5),
                    town: rng.random_range(0..N_TOWNS),
                    job: rng.random_range(0..JOBS.len()),
                    age: rng.random_range(18..90),
                    pet: rng.random_range(0..NOUNS.len()),
                    pet_name,
                    colour: rng.random_range(0..COLOURS.len()),
                })
                .collect();
            World { people, towns }
        })
    }

    fn fact(rng: &mut ChaCha8Rng, p: &Person) -> String {
        let w = world();
        let name = &p.name;
        match rng.random_range(0..5) {
            0 => format!("{name} lives in {}.", w.towns[p.town]),
            1 => format!("{name} works as a {}.", JOBS[p.job]),
            2 => format!("{name} is {} years old.", p.age),
            3 => format!("{name}'s {} is called {}.", NOUNS[p.pet].0, p.pet_name),
            _ => format!("The favourite colour of {name} is {}.", COLOURS[p.colour]),
        }
    }

    fn capitalize(s: &str) -> String {
        let mut c = s.chars();
        match c.next() {
            Some(f) => f.to_uppercase().collect::<String>() + c.as_str(),
            None => String::new(),
        }
    }

    struct Cast {
        hero: &'static Person,
        friend: &'static Person,
        place: &'static str,
        pet: (&'static str, &'static str),
    }

    fn pron(female: bool) -> (&'static str, &'static str, &'static str) {
        if female {
            ("she", "her", "her")
        } else {
            ("he", "him", "his")
        }
    }

    fn sentence(rng: &mut ChaCha8Rng, c: &Cast) -> String {
        if rng.random_bool(0.35) {
            let who = if rng.random_bool(0.7) { c.hero } else { c.friend };
            return fact(rng, who);
        }
        let hero = &c.hero.name;
        let friend = &c.friend.name;
        let (he, him, his) = pron(c.hero.female);
        let n1 = *zipf(rng, NOUNS);
        let n2 = *zipf(rng, NOUNS);
        let v = *zipf(rng, VERBS);
        let adj = *zipf(rng, ADJS);
        let count = rng.random_range(2..NUMBERS.len());
        match rng.random_range(0..12) {
            0 => format!("{hero} walked to the {} with {friend}.", c.place),
            1 => format!("{} {} a {adj} {} near the {}.", capitalize(he), v.2, n1.0, n2.0),
            2 => format!("The {} {} the {} every {}.", n1.1, v.0, n2.0, zipf(rng, TIMES)),
            3 => format!("The {} {} the {}.", n1.0, v.1, n2.1),
            4 if rng.random_bool(0.5) => format!("{friend} told {him} that the {} was {adj}.", n1.0),
            4 => format!("{friend} told {him} that the {} were {adj}.", n1.1),
            5 => format!("After that, {hero} gave {his} {} to {friend}.", c.pet.0),
            6 => format!("{hero} and {friend} {} {} {}.", v.0, NUMBERS[count], n1.1),
            7 => format!("\"What a {adj} {}!\" said {hero}.", n1.0),
            8 => format!("When {he} {} the {}, {friend} {} it too.", v.2, n1.0, v.2),
            9 => {
                let seq: Vec<&str> = NUMBERS[..=count].to_vec();
                format!(
                    "There were {} {} at the {}, and {hero} counted them: {}.",
                    NUMBERS[count],
                    c.pet.1,
                    c.place,
                    seq.join(", ")
                )
            }
            10 => format!("Every {} {hero} {} {his} {adj} {}.", zipf(rng, TIMES), v.1, c.pet.0),
            _ => format!("{} {} is {adj}, but the {} are {}.", capitalize(his), c.pet.0, n2.1, zipf(rng, ADJS)),
        }
    }

    fn paragraph(rng: &mut ChaCha8Rng) -> String {
        let people = &world().people;
        let hero = zipf(rng, people);
        let mut friend = zipf(rng, people);
        while std::ptr::eq(friend, hero) {
            friend = &people[rng.random_range(0..people.len())];
        }
        let cast = Cast {
            hero,
            friend,
            place: zipf(rng, PLACES),
            pet: NOUNS[hero.pet],
        };
        let n = rng.random_range(3..8);
        let mut out: Vec<String> = Vec::with_capacity(n);
        for _ in 0..n {
            out.push(sentence(rng, &cast));
        }
        out.join(" ") + "\n"
    }

    /// One task instance, as used both in the corpus and for evaluation.
    pub fn task(rng: &mut ChaCha8Rng) -> TaskInstance {
        if rng.random_bool(0.5) {
            let a = rng.random_range(0..50u32);
            let b = rng.random_range(0..50u32);
            TaskInstance {
                prompt: format!("add {a}+{b}=").into_bytes(),
                answer: (a + b).to_string().into_bytes(),
            }
        } else {
            let len = rng.random_range(3..7);
            let s: String = (0..len).map(|_| rng.random_range(b'a'..=b'z') as char).collect();
            TaskInstance {
                prompt: format!("copy {s}>").into_bytes(),
                answer: s.into_bytes(),
            }
        }
    }

    /// About `n_bytes` of text; `task_fraction` of the bytes are task lines.
    pub fn generate(seed: u64, n_bytes: usize, task_fraction: f64) -> Vec<u8> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut out = Vec::with_capacity(n_bytes + 512);
        let mut task_bytes = 0usize;
        while out.len() < n_bytes {
            if (task_bytes as f64) < task_fraction * out.len() as f64 {
                for _ in 0..rng.random_range(2..6) {
                    let t = task(&mut rng);
                    let before = out.len();
                    out.extend_from_slice(&t.prompt);
                    out.extend_from_slice(&t.answer);
                    out.push(b'\n');
                    task_bytes += out.len() - before;
                }
            } else {
                out.extend_from_slice(paragraph(&mut rng).as_bytes());
            }
        }
        out.truncate(n_bytes);
        out
    }

    /// Held-out task instances, each prompt preceded by a newline as in the corpus.
    pub fn task_set(seed: u64, count: usize) -> Vec<TaskInstance> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        (0..count)
            .map(|_| {
                let mut t = task(&mut rng);
                t.prompt.insert(0, b'\n');
                t
            })
            .collect()
    }
}
