//! Derive a target prompt by swapping the word nearest to a source concept.

use ndarray::Array1;
use oig_core::backends::VocabularyEncoder;
use oig_core::pipeline::replace_token;

fn main() -> oig_core::Result<()> {
    let base = VocabularyEncoder::new(16, 7, 1);
    // place "kitten" close to "cat" in token space
    let cat = base.token_vector("cat");
    let mix: Array1<f64> = &cat * 0.9 + base.token_vector("noise") * 0.3;
    let norm = mix.dot(&mix).sqrt();
    let encoder = base.with_token("kitten", mix / norm)?;

    for prompt in [
        "a cat sitting on grass",
        "a kitten on a sofa",
        "cat",
        "Portrait of a Cat.",
    ] {
        println!("{prompt:<24} -> {}", replace_token(prompt, "cat", "dog", &encoder)?);
    }
    Ok(())
}
