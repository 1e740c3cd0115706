use polymer_web::{quenched_profile, renewal_summary, synchronized_walks};
use serde_json::Value;

fn parse(s: String) -> Value {
    let v: Value = serde_json::from_str(&s).unwrap();
    assert!(v.get("error").is_none(), "{v}");
    v
}

#[test]
fn renewal_root_matches_closed_form() {
    let v = parse(renewal_summary(1, 2.5, 12, 20));
    let gap = (v["exp_minus_xi"].as_f64().unwrap() - v["free_root"].as_f64().unwrap()).abs();
    assert!(gap < 1e-6, "{gap}");
    let q: f64 = v["q_by_height"].as_array().unwrap().iter().map(|x| x.as_f64().unwrap()).sum();
    assert!((q - 1.0).abs() < 1e-9, "{q}");
}

#[test]
fn profile_reduces_to_free_at_zero_beta() {
    let v = parse(quenched_profile(1, 2.5, 0.0, 1.0, 0.3, 4, 5));
    let z = v["partition"].as_f64().unwrap();
    let f = v["free_power"].as_f64().unwrap();
    assert!((z - f).abs() <= v["tail_bound"].as_f64().unwrap().max(1e-8 * f));
    let mass: f64 = v["endpoint"].as_array().unwrap().iter().map(|p| p[1].as_f64().unwrap()).sum();
    assert!((mass - 1.0).abs() < 1e-9, "{mass}");
}

#[test]
fn walks_stay_synchronised() {
    let v = parse(synchronized_walks(2.5, 3, 40, 11));
    let (u, w) = (v["u"].as_array().unwrap(), v["v"].as_array().unwrap());
    assert_eq!(u.len(), 41);
    for (a, b) in u.iter().zip(w) {
        assert_eq!(a[0], b[0]);
    }
    assert_eq!(synchronized_walks(2.5, 3, 40, 11), synchronized_walks(2.5, 3, 40, 11));
}

#[test]
fn bad_input_is_reported() {
    let v: Value = serde_json::from_str(&renewal_summary(1, 0.5, 4, 4)).unwrap();
    assert!(v["error"].is_string());
}
