//! Writes toy image embeddings to an FCF1 file and reads them back.

use figcap::features::{read_features, toy_image_encoder, write_features};

fn main() -> figcap::Result<()> {
    let dir = std::env::temp_dir().join("figcap-feature-demo");
    std::fs::create_dir_all(&dir)?;
    let path = dir.join("images.fcf");

    let keys = ["fig-001", "fig-002", "fig-003"];
    let pairs: Vec<_> = keys
        .iter()
        .map(|k| (k.to_string(), toy_image_encoder(k, 8, 7)))
        .collect();
    write_features(&path, &pairs, 8)?;
    println!(
        "wrote {} ({} bytes)",
        path.display(),
        std::fs::metadata(&path)?.len()
    );

    for (key, v) in read_features(&path)? {
        let norm = v.iter().map(|x| x * x).sum::<f64>().sqrt();
        println!(
            "{key}: norm {norm:.6}, first {:+.4} {:+.4} {:+.4}",
            v[0], v[1], v[2]
        );
    }
    Ok(())
}
