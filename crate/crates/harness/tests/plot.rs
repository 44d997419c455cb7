use wkb_harness::fit_power_law;
use wkb_harness::plot::{emit_plot, FitOverlay, PlotError, PlotStyle, Series};

fn decay(name: &str, p: f64) -> Series {
    Series::new(name, (1..=6).map(|i| (2f64.powi(i), 3.0 * 2f64.powi(i).powf(p))).collect())
}

#[test]
fn svg_parses_and_lists_every_series() {
    let style = PlotStyle::log_log("two & more", "tau", "norm");
    let svg = emit_plot(&[decay("first", -1.0), decay("second", -0.5)], &style).unwrap();
    let doc = roxmltree::Document::parse(&svg).unwrap();
    assert_eq!(doc.root_element().tag_name().name(), "svg");
    let lines = doc.descendants().filter(|n| n.attribute("class") == Some("series")).count();
    assert_eq!(lines, 2);
    let texts: Vec<&str> = doc.descendants().filter_map(|n| n.text()).collect();
    assert!(texts.contains(&"first") && texts.contains(&"second"));
    assert!(texts.contains(&"two & more"));
    let legend_colors: Vec<&str> =
        doc.descendants().filter(|n| n.attribute("class") == Some("legend")).filter_map(|n| n.attribute("stroke")).collect();
    assert_eq!(legend_colors.len(), 2);
    assert_ne!(legend_colors[0], legend_colors[1]);
}

#[test]
fn fit_line_endpoints_follow_the_fit() {
    let s = decay("data", -0.8);
    let fit = fit_power_law(&s.points).unwrap();
    let mut style = PlotStyle::log_log("fit", "x", "y");
    style.fits.push(FitOverlay { name: "fit".into(), fit, x_min: 2.0, x_max: 64.0 });
    let svg = emit_plot(&[s], &style).unwrap();
    let doc = roxmltree::Document::parse(&svg).unwrap();
    let line = doc.descendants().find(|n| n.attribute("class") == Some("fit")).unwrap();
    let get = |a: &str| line.attribute(a).unwrap().parse::<f64>().unwrap();
    for (x, y) in [(get("data-x0"), get("data-y0")), (get("data-x1"), get("data-y1"))] {
        let exact = 3.0 * x.powf(-0.8);
        assert!((y - exact).abs() <= 1e-9 * exact, "{y} vs {exact}");
    }
    assert_eq!(get("data-x0"), 2.0);
    assert_eq!(get("data-x1"), 64.0);
}

#[test]
fn unusable_input_is_rejected() {
    let style = PlotStyle::log_log("t", "x", "y");
    assert_eq!(emit_plot(&[], &style), Err(PlotError::NoSeries));
    assert!(matches!(emit_plot(&[Series::new("one", vec![(1.0, 1.0)])], &style), Err(PlotError::TooFewPoints(_))));
    let zeros = Series::new("zeros", vec![(1.0, 0.0), (2.0, 0.0)]);
    assert!(matches!(emit_plot(&[zeros], &style), Err(PlotError::NoUsablePoints(_))));
}
