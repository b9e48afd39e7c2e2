//! Design an odd random-phase multisine with detection lines and export it.

use fblin::excitation::{design, LineClass, MultisineKind, MultisineSpec};

fn main() -> fblin::Result<()> {
    let spec = MultisineSpec {
        n_samples: 4000,
        fs: 100.0,
        f_min: 0.025,
        f_max: 14.0,
        rms: 0.12,
        kind: MultisineKind::OddWithDetection { group_size: 4 },
        seed: 1,
    };
    let d = design(&spec)?;
    let count = |c| d.classes.iter().filter(|&&x| x == c).count();
    println!(
        "{} lines at {} Hz: {} excited, {} odd detection, {} even detection",
        d.n_lines(),
        spec.f_res(),
        count(LineClass::Excited),
        count(LineClass::OddDetection),
        count(LineClass::EvenDetection)
    );
    println!("first odd detection lines (Hz): {:?}", &d.lines_of(LineClass::OddDetection)[..5].iter().map(|&q| d.freq(q)).collect::<Vec<_>>());

    let dir = std::env::temp_dir().join("fblin-multisine");
    std::fs::create_dir_all(&dir)?;
    fblin::io::write_excitation_csv(dir.join("u.csv"), spec.fs, &d.signal)?;
    fblin::io::write_json(dir.join("u.json"), &d.metadata())?;
    println!("wrote {}", dir.display());
    Ok(())
}
