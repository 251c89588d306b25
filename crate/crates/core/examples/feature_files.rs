//! Writing and reading the binary feature format, label files and
//! proportion files.

use pcpl::io;
use pcpl::{FeatureMatrix, ProportionSpec};

fn main() -> pcpl::Result<()> {
    let dir = std::env::temp_dir().join("pcpl-feature-files");
    std::fs::create_dir_all(&dir)?;

    let x = FeatureMatrix::from_rows(&[vec![0.5, -1.25, 2.0], vec![3.0, 0.0, -0.75]])?;
    let bytes = io::encode_features(&x)?;
    println!("{} bytes, header {:02x?}", bytes.len(), &bytes[..16]);

    let path = dir.join("x.pcpl");
    io::write_features(&x, &path)?;
    let back = io::read_features(&path)?;
    println!("read back {}x{}: {:?}", back.n(), back.d(), back.data());

    io::write_labels(&[0, 1], dir.join("x.labels"))?;
    println!("labels {:?}", io::read_labels(dir.join("x.labels"))?);

    let p = ProportionSpec::new(vec![0.5414, 0.2707, 0.1112, 0.0767])?;
    io::write_proportions(&p, dir.join("p.json"))?;
    println!("proportions {:?}", io::read_proportions(dir.join("p.json"))?.as_slice());

    // a truncated payload is reported with its byte offset
    match io::decode_features(&bytes[..20]) {
        Err(e) => println!("truncated: {e}"),
        Ok(_) => unreachable!(),
    }
    Ok(())
}
