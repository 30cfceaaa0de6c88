from coopsheaf.plotting import plot_depth_sweep, plot_history


def test_plot_history(tmp_path):
    history = [{"epoch": e, "train_loss": 1.0 / (e + 1), "train_metric": 0.5, "val_loss": None, "val_metric": None,
                "test_loss": 0.9, "test_metric": 0.4} for e in (0, 10, 20)]
    path = tmp_path / "h.png"
    plot_history(history, path, title="demo")
    assert path.read_bytes()[:8] == b"\x89PNG\r\n\x1a\n"


def test_plot_depth_sweep(tmp_path):
    rows = [{"model": m, "depth": r, "train_accuracy": a} for m, a in (("csnn", 1.0), ("gcn", 0.6)) for r in (2, 3)]
    path = tmp_path / "s.png"
    plot_depth_sweep(rows, path)
    assert path.stat().st_size > 0
