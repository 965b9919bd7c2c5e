use serde_json::Value;

fn parse(s: Result<String, wasm_bindgen::JsError>) -> Value {
    serde_json::from_str(&s.unwrap_or_else(|_| panic!("binding failed"))).unwrap()
}

#[test]
fn tap_curve_brackets_free_energy() {
    let v = parse(tapsphere_web::tap_curve(60, 2.0, 10.0, 1, 64));
    assert_eq!(v["s"].as_array().unwrap().len(), v["phi"].as_array().unwrap().len());
    let (f, sup) = (v["free_energy"].as_f64().unwrap(), v["sup_tap"].as_f64().unwrap());
    assert!((f - sup).abs() < 0.05, "F = {f}, sup = {sup}");
    assert!(v["sup_naive"].as_f64().unwrap() > sup);
}

#[test]
fn histogram_masses_sum_to_one() {
    let v = parse(tapsphere_web::mp_histogram(100, 2.0, 3, 20));
    let emp: f64 = v["empirical"].as_array().unwrap().iter().map(|x| x.as_f64().unwrap()).sum();
    let mp: f64 = v["mp"].as_array().unwrap().iter().map(|x| x.as_f64().unwrap()).sum();
    assert!((emp - 1.0).abs() < 1e-9);
    assert!((mp - 1.0).abs() < 1e-3);
}

#[test]
fn restricted_curve_integrates_to_free_energy() {
    let v = parse(tapsphere_web::restricted_curve(80, 2.0, 10.0, 2, 201));
    let (f, i) = (v["free_energy"].as_f64().unwrap(), v["integrated"].as_f64().unwrap());
    assert!((f - i).abs() < 0.02, "{f} vs {i}");
    assert!(v["argmax"].as_f64().unwrap() > 0.0);
}
