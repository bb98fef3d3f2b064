//! CS, SD and BD over a small manifest of synthetic image pairs.

use ndarray::{ArrayD, IxDyn};
use oig_core::backends::AdapterRegistry;
use oig_core::imageio;
use oig_core::metrics::read_manifest;
use oig_core::pipeline::{run_metrics, EditConfig};

fn main() -> oig_core::Result<()> {
    let dir = std::env::temp_dir().join(format!("oig-metrics-{}", std::process::id()));
    std::fs::create_dir_all(&dir).map_err(|e| oig_core::Error::io(&dir, e))?;

    let src = ArrayD::from_shape_fn(IxDyn(&[12, 12, 3]), |ix| {
        ((ix[0] + 2 * ix[1] + ix[2]) % 12) as f64 / 11.0
    });
    // same layout, shifted colours in the right half
    let edited = ArrayD::from_shape_fn(IxDyn(&[12, 12, 3]), |ix| {
        let v = src[[ix[0], ix[1], ix[2]]];
        if ix[1] >= 6 {
            (v * 0.6 + 0.3).min(1.0)
        } else {
            v
        }
    });
    let scrambled = ArrayD::from_shape_fn(IxDyn(&[12, 12, 3]), |ix| src[[11 - ix[1], ix[0], ix[2]]]);
    imageio::save_rgb(&dir.join("src.png"), &src)?;
    imageio::save_rgb(&dir.join("edited.png"), &edited)?;
    imageio::save_rgb(&dir.join("scrambled.png"), &scrambled)?;
    let mask = image::GrayImage::from_fn(12, 12, |x, _| image::Luma([if x < 6 { 255 } else { 0 }]));
    mask.save(dir.join("mask.png"))?;

    let manifest = dir.join("manifest.csv");
    std::fs::write(
        &manifest,
        "pair_id,task,src,tgt,prompt,mask\n\
         same,identity,src.png,src.png,a photo of a cat,mask.png\n\
         edit,cat2dog,src.png,edited.png,a photo of a dog,mask.png\n\
         scramble,cat2dog,src.png,scrambled.png,a photo of a dog,\n",
    )
    .map_err(|e| oig_core::Error::io(&manifest, e))?;

    let entries = read_manifest(&manifest)?;
    let report = run_metrics(&entries, &EditConfig::default(), &AdapterRegistry::new())?;
    print!("{}", String::from_utf8_lossy(&report.to_csv()?));
    std::fs::remove_dir_all(&dir).ok();
    Ok(())
}
