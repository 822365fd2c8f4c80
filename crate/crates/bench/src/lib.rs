//! Seeded input generators for the benchmarks.

use rand::seq::IndexedRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use searchforge_core::corpus::{AnnotatedQuery, QaRecord};
use searchforge_core::orchestrator::Trajectory;
use searchforge_core::testing::TrajectoryBuilder;

const WORDS: &[&str] = &[
    "river", "capital", "film", "director", "novel", "treaty", "emperor", "album", "element", "team",
    "museum", "engine", "series", "opera", "mountain", "election", "poet", "brand", "theory", "match",
];

pub fn rng(seed: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed)
}

fn phrase(rng: &mut impl Rng, len: usize) -> String {
    (0..len).map(|_| *WORDS.choose(rng).unwrap()).collect::<Vec<_>>().join(" ")
}

/// `n` annotated queries spread over `domains` labels with 1 to 4 keywords
/// each, drawn from a vocabulary of `vocab` terms.
pub fn corpus(n: usize, domains: usize, vocab: usize, seed: u64) -> Vec<AnnotatedQuery> {
    let mut r = rng(seed);
    (0..n)
        .map(|i| {
            let k = r.random_range(1..=4);
            let mut keywords: Vec<String> = (0..k).map(|_| format!("kw{}", r.random_range(0..vocab))).collect();
            keywords.sort();
            keywords.dedup();
            AnnotatedQuery {
                record: QaRecord {
                    id: format!("q{i:06}"),
                    question: format!("What {}?", phrase(&mut r, 6)),
                    gold_answers: vec![phrase(&mut r, 2)],
                    source: "bench".into(),
                },
                domain: format!("d{}", r.random_range(0..domains)),
                keywords,
                interrogative_count: r.random_range(1..=3),
            }
        })
        .collect()
}

/// Prediction and gold answer pairs of a few words each.
pub fn answer_pairs(n: usize, seed: u64) -> Vec<(String, String)> {
    let mut r = rng(seed);
    (0..n)
        .map(|_| {
            let a = r.random_range(1..8);
            let b = r.random_range(1..8);
            (phrase(&mut r, a), phrase(&mut r, b))
        })
        .collect()
}

/// A search-result page of roughly `paragraphs` paragraphs plus scripts,
/// styles and entities for the extractor to strip.
pub fn html_page(paragraphs: usize, seed: u64) -> String {
    let mut r = rng(seed);
    let mut page = String::from(
        "<html><head><title>Bench</title><style>p { color: red; }</style>\
         <script>var x = 1 < 2;</script></head><body><nav>Home | About</nav>",
    );
    for i in 0..paragraphs {
        page.push_str(&format!("<h2>Section {i}</h2><p>{} &amp; {}.</p>", phrase(&mut r, 30), phrase(&mut r, 10)));
        if i % 5 == 0 {
            page.push_str("<script>track('view');</script>");
        }
    }
    page.push_str("</body></html>");
    page
}

/// A trajectory with `searches` search rounds and `words_per_turn` words of
/// reasoning before each, ending in a boxed answer.
pub fn trajectory(searches: usize, words_per_turn: usize, seed: u64) -> Trajectory {
    let mut r = rng(seed);
    let mut b = TrajectoryBuilder::new(searchforge_core::testing::query("bench", &["river capital"]));
    for _ in 0..searches {
        let q = phrase(&mut r, 3);
        b = b.search(&phrase(&mut r, words_per_turn), &q, &phrase(&mut r, 12));
    }
    b.think(&format!("{} so the answer is \\boxed{{river capital}}", phrase(&mut r, words_per_turn)))
        .build()
}
