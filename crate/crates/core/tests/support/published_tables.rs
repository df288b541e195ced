/// Transcribed independently of the fixtures file: (table, method, itc,
/// clip, fid, vqa), "--" where nothing was reported.
pub const EXPECTED: &[(&str, &str, &str, &str, &str, &str)] = &[
    ("pascal3d_comparison", "Ground Truth", "0.401", "--", "--", "--"),
    ("pascal3d_comparison", "DG", "0.268", "0.704", "269.24", "0.519"),
    ("pascal3d_comparison", "Zero123XL", "0.270", "0.750", "193.27", "0.506"),
    ("pascal3d_comparison", "NFI", "0.284", "0.784", "129.43", "0.599"),
    ("pascal3d_comparison", "Ours", "0.380", "0.856", "117.49", "0.903"),
    ("waymo_comparison", "Ground Truth", "0.422", "--", "--", "--"),
    ("waymo_comparison", "DG", "0.282", "0.819", "350.61", "0.644"),
    ("waymo_comparison", "Zero123XL", "0.306", "0.835", "251.59", "0.589"),
    ("waymo_comparison", "NFI", "0.298", "0.829", "188.23", "0.194"),
    ("waymo_comparison", "Ours", "0.418", "0.840", "163.40", "0.854"),
    ("objaverse_comparison", "Ground Truth", "0.429", "--", "--", "--"),
    ("objaverse_comparison", "DG", "0.269", "0.761", "296.39", "0.516"),
    ("objaverse_comparison", "Zero123XL", "0.319", "0.812", "175.18", "0.366"),
    ("objaverse_comparison", "NFI", "0.289", "0.772", "146.06", "0.669"),
    ("objaverse_comparison", "Ours", "0.412", "0.872", "114.75", "0.838"),
    ("expert_training_ablation", "Single DM (50 epochs)", "0.272", "0.781", "192.55", "--"),
    ("expert_training_ablation", "Single DM (100 epochs)", "0.283", "0.806", "189.04", "--"),
    ("expert_training_ablation", "Multi-expert DMs (50 epochs)", "0.333", "0.835", "122.91", "--"),
    ("view_count_ablation", "Single DM (16)", "0.272", "0.781", "192.55", "--"),
    ("view_count_ablation", "Single DM (9)", "0.311", "0.811", "150.31", "--"),
    ("view_count_ablation", "Multi-expert DMs", "0.333", "0.835", "122.91", "--"),
    ("controlnet_ablation", "NFI (ShapeNet)", "0.210", "0.744", "428.35", "--"),
    ("controlnet_ablation", "NFI (ShapeNet + ControlNet)", "0.261", "0.761", "267.47", "--"),
    ("controlnet_ablation", "Ours (ShapeNet)", "0.403", "0.831", "186.98", "--"),
    ("controlnet_ablation", "Ours (ShapeNet + ControlNet)", "0.418", "0.840", "163.40", "--"),
];
