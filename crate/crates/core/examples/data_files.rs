//! Dataset and model files: CSV round trip and both model encodings.

use evbracket::io;
use evbracket::trainer::generate_synthetic;

fn main() -> evbracket::Result<()> {
    let dir = std::env::temp_dir().join("evbracket-data-files");
    std::fs::create_dir_all(&dir)?;
    let (data, model) = generate_synthetic(5, 2, 0.3, 100, 4)?;

    let csv = dir.join("data.csv");
    io::write_csv(&csv, data.points())?;
    let back = io::read_csv(&csv, false)?;
    println!(
        "{}: {} x {}, exact round trip: {}",
        csv.display(),
        back.len(),
        back.dim(),
        back.points() == data.points()
    );

    for name in ["model.json", "model.bin"] {
        let path = dir.join(name);
        io::save_model(&path, &model)?;
        let m = io::load_model(&path)?;
        println!(
            "{}: {:?}, {} bytes, exact: {}",
            path.display(),
            io::ModelFormat::from_path(&path),
            std::fs::metadata(&path)?.len(),
            m.c_r() == model.c_r() && m.sigma() == model.sigma()
        );
    }
    Ok(())
}
