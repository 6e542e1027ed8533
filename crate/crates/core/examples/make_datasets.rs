//! Regenerates the sample CSV files under `data/`.

use std::fs::File;
use std::path::Path;

use gpprog::dataset::{write_csv, Fleet, Schema};
use gpprog::synthetic::{cell_a1, dataset_b, dataset_c, A1_SEED, B_SEED, C_SEED};

fn main() -> gpprog::Result<()> {
    let dir = Path::new(env!("CARGO_MANIFEST_DIR")).join("data");
    std::fs::create_dir_all(&dir)?;
    let cycles = Schema::default();
    let days = Schema::parse("cycle=day")?;
    write_csv(File::create(dir.join("cell_a1.csv"))?, &Fleet::new(vec![cell_a1(A1_SEED)?])?, &cycles)?;
    write_csv(File::create(dir.join("dataset_b.csv"))?, &Fleet::new(vec![dataset_b(B_SEED)?])?, &cycles)?;
    write_csv(File::create(dir.join("dataset_c.csv"))?, &dataset_c(C_SEED)?, &days)?;
    Ok(())
}
