use std::collections::HashMap;

fn main() {
    let mut seen: HashMap<[u8; 32], usize> = HashMap::new();
    for index in 0..2000usize {
        let seed = eqinv::rng::derive_seed(1, &["glyph", "train", "0", &index.to_string()]);
        if let Some(prev) = seen.insert(seed, index) {
            println!("collision: index {prev} == index {index}");
        }
    }
    println!("done");
}
