//! Writing and reading DT4 tensor files.
//!
//! `cargo run --example dt4_io`

use dycaf::params::named_rng;
use dycaf::tensor::io::{read_dt4, write_dt4, Dtype};
use dycaf::{Error, Result, Shape, Tensor4};

fn main() -> Result<()> {
    let dir = tempfile::tempdir()?;
    let t = Tensor4::randn(Shape::new(2, 3, 4, 5), &mut named_rng(9, "example"));

    let p64 = dir.path().join("t64.dt4");
    write_dt4(&p64, &t, Dtype::F64)?;
    let back = read_dt4(&p64)?;
    println!("f64: {} bytes, bit-exact {}", std::fs::metadata(&p64)?.len(), back.bit_eq(&t));

    let p32 = dir.path().join("t32.dt4");
    write_dt4(&p32, &t, Dtype::F32)?;
    let back = read_dt4(&p32)?;
    println!(
        "f32: {} bytes, max rounding error {:.2e}",
        std::fs::metadata(&p32)?.len(),
        back.sub(&t)?.max_abs()
    );

    let bad = dir.path().join("bad.dt4");
    std::fs::write(&bad, b"NOPE and some bytes")?;
    match read_dt4(&bad) {
        Err(e @ Error::BadMagic(_)) => println!("rejected: {e}"),
        other => println!("unexpected: {other:?}"),
    }
    Ok(())
}
