use dps_core::bench::*;
use dps_core::train::*;
use dps_core::{Dataset, DpsModel, NetworkSpec};

fn tmspe(model: &DpsModel, data: &Dataset) -> f64 {
    let p = model.predict(&data.features).unwrap();
    let y = data.response.as_vector();
    mspe(p.as_slice(), y.as_slice()).unwrap()
}

fn main() {
    let spec = SimSpec::new(SimFunction::Example1, 2, 400, 500, 11);
    let (train_raw, test) = generate(&spec).unwrap();
    let y = train_raw.response.as_vector();
    let m = y.sum() / y.len() as f64;
    let sd = (y.iter().map(|v| (v - m) * (v - m)).sum::<f64>() / y.len() as f64).sqrt();
    let train = Dataset::regression(train_raw.features.clone(), y.map(|v| (v - m) / sd)).unwrap();
    let net = NetworkSpec::regression(2, 50, 2, 15, 3, 2, 1);

    for lam in [1e-4, 1e-2, 0.1, 0.5, 1.0, 5.0] {
        let mut gd = DpsModel::init(&net, 1).unwrap();
        gd.set_standardization(&train.features);
        gd.lambdas = vec![lam, lam];
        let fopts = TrainOptions { learning_rate: 1e-2, max_epochs: 3000, rel_tol: 1e-13, ..Default::default() };
        let t = fit(&mut gd, &train, &fopts).unwrap();
        let final_obj = *t.last().unwrap();
        for v in gd.last_layer_weights.iter_mut() { *v *= sd; }
        gd.last_layer_weights[(0,0)] += m;
        println!("GD lambda={lam:.0e}: obj={final_obj:.2} test={:.4}", tmspe(&gd, &test));
    }
}
