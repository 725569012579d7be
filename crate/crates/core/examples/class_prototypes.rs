//! Prototype initialization by k-means and the resulting class maps.
//!
//! `cargo run --example class_prototypes`

use dycaf::class_adapt::{adapt_features, class_attention, kmeans_init, projected_samples, ClassAdaptMode, ClassAdaptParams};
use dycaf::losses::kl_uniform_loss;
use dycaf::params::named_rng;
use dycaf::{ParamStore, Result, Shape, Tensor4};

fn main() -> Result<()> {
    let head = ClassAdaptParams::new("cls", 16, 4, ClassAdaptMode::Prototype)?;
    let mut store = ParamStore::new(5);
    head.register(&mut store)?;
    println!("prototype head: {} parameters", head.count());

    let mut rng = named_rng(5, "features");
    let feats: Vec<Tensor4> = (0..3).map(|_| Tensor4::randn(Shape::new(1, 16, 8, 8), &mut rng)).collect();
    let refs: Vec<&Tensor4> = feats.iter().collect();
    let samples = projected_samples(&refs, &store, &head)?;
    let protos = kmeans_init(&samples, 4, 5)?;
    println!("{} samples -> {} prototypes of dimension {}", samples.len(), protos.num_classes(), protos.dim());

    let maps = class_attention(&feats[0], &protos, &store, &head)?;
    println!("spatial sums {:.12?}", maps.spatial_sums());
    println!("KL to uniform {:.4}", kl_uniform_loss(&maps)?);
    let adapted = adapt_features(&feats[0], &maps, &store, &head)?;
    println!("adapted features {}, norm {:.4}", adapted.shape(), adapted.norm());
    Ok(())
}
