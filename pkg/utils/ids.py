# Single source of truth for file names, log columns, archive keys and term names.

class IDS:
    # Dataset layout
    CAMERAS_JSON   = "cameras.json"
    IMAGES_DIR     = "images"
    MASKS_DIR      = "masks"
    VIEW_PATTERN   = "view_%04d.png"
    LIGHT_GT_PFM   = "light_gt.pfm"
    MATERIAL_GT    = "material_gt.json"
    MESH_GT_PLY    = "mesh_gt.ply"
    DATASET_FORMAT = 1

    # Run directory
    CHECKPOINT_DIR     = "checkpoints"
    CHECKPOINT_PATTERN = "ckpt_%06d.npz"
    LAST_GOOD          = "last_good.npz"
    TRAIN_LOG          = "train_log.csv"
    LOSS_CURVES_HTML   = "loss_curves.html"
    EVAL_JSON          = "eval_report.json"
    EVAL_HTML          = "eval.html"

    # Checkpoint archive key prefixes
    KEY_PARAM  = "param/"
    KEY_ADAM_M = "adam_m/"
    KEY_ADAM_V = "adam_v/"
    KEY_META   = "meta/"
    CHECKPOINT_FORMAT = 1

    # Parameter names outside the three fields
    LOG_KAPPA = "renderer.log_kappa"

    # Loss terms (CSV columns, LossBreakdown keys, LossWeights suffixes)
    TERM_L1           = "l1"
    TERM_EIKONAL      = "eikonal"
    TERM_MASK         = "mask"
    TERM_MAT          = "mat"
    TERM_METAL        = "metal"
    TERM_LIGHT_INT    = "light_int"
    TERM_LIGHT_SMOOTH = "light_smooth"
    TERMS = (TERM_L1, TERM_EIKONAL, TERM_MASK, TERM_MAT, TERM_METAL, TERM_LIGHT_INT, TERM_LIGHT_SMOOTH)

    # Training log columns
    COL_ITERATION = "iteration"
    COL_TOTAL     = "total"
    COL_LR        = "lr"
    COL_KAPPA     = "kappa"
    LOG_COLUMNS = (COL_ITERATION,) + TERMS + (COL_TOTAL, COL_LR, COL_KAPPA)

    # Mesh attributes
    PBR_COLUMNS = ("albedo_r", "albedo_g", "albedo_b", "roughness", "metallic")

    # Environment
    THREADS_ENV = "MATDECOMP_THREADS"
