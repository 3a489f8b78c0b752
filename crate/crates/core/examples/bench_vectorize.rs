use std::time::Instant;
use vgloop::maskio::load_mask_stack;
use vgloop::raster::psnr;
use vgloop::vectorize::{render_for, vectorize, VectorizeConfig};
use vgloop::RasterImage;

fn main() {
    let root = std::env::args().nth(1).expect("fixture dir");
    let cfg = VectorizeConfig::default();
    for entry in std::fs::read_dir(&root).unwrap() {
        let dir = entry.unwrap().path();
        if !dir.is_dir() {
            continue;
        }
        let img = RasterImage::load(&dir.join("image.png")).unwrap().to_rgb();
        let stack = load_mask_stack(&dir.join("masks")).unwrap();
        let t = Instant::now();
        let out = vectorize(&img, &stack, &cfg).unwrap();
        let dt = t.elapsed().as_secs_f64();
        let p0 = psnr(&render_for(&out.initial, &cfg.optimize).unwrap(), &img).unwrap();
        let p1 = psnr(&render_for(&out.document, &cfg.optimize).unwrap(), &img).unwrap();
        println!(
            "{:?} masks={} regions={} init={:.2} final={:.2} time={:.2}s",
            dir.file_name().unwrap(),
            stack.mask_count(),
            out.document.node_count(),
            p0,
            p1,
            dt
        );
    }
}
