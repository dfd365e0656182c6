use std::ffi::{CStr, CString};
use std::path::{Path, PathBuf};
use std::process::Command;
use std::ptr;
use std::sync::OnceLock;
use steerkit::augment::{self, AugmentKind, AugmentParams};
use steerkit::checkpoint::Checkpoint;
use steerkit::data::{DatasetSpec, ShapesConfig};
use steerkit::steer::{delta_steer, embed_images};
use steerkit::trainer::{train, TrainConfig};
use steerkit_ffi::*;

struct Fixture {
    _dir: tempfile::TempDir,
    path: PathBuf,
    ck: Checkpoint,
}

fn fixture() -> &'static Fixture {
    static F: OnceLock<Fixture> = OnceLock::new();
    F.get_or_init(|| {
        let cfg = TrainConfig {
            epochs: 2,
            warmup_epochs: 1,
            batch_size: 32,
            dataset: DatasetSpec::Shapes(ShapesConfig {
                n_train: 64,
                n_eval: 8,
                ..Default::default()
            }),
            ..Default::default()
        };
        let ds = cfg.dataset.load().unwrap();
        let ck = train(&cfg, &ds, None).unwrap();
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("tiny.ckpt");
        ck.save(&path).unwrap();
        Fixture { _dir: dir, path, ck }
    })
}

fn cpath(p: &Path) -> CString {
    CString::new(p.to_str().unwrap()).unwrap()
}

fn last_error() -> String {
    let p = steerkit_last_error();
    assert!(!p.is_null());
    unsafe { CStr::from_ptr(p) }.to_string_lossy().into_owned()
}

struct Handle(*mut SteerkitCheckpoint);

impl Drop for Handle {
    fn drop(&mut self) {
        unsafe { steerkit_checkpoint_free(self.0) }
    }
}

fn load() -> Handle {
    let mut h = ptr::null_mut();
    let s = unsafe { steerkit_checkpoint_load(cpath(&fixture().path).as_ptr(), &mut h) };
    assert_eq!(s, SteerkitStatus::Ok);
    assert!(steerkit_last_error().is_null());
    Handle(h)
}

#[test]
fn load_errors_map_to_status_codes() {
    let f = fixture();
    let mut h = ptr::null_mut();
    let missing = cpath(&f.path.with_file_name("absent.ckpt"));
    assert_eq!(unsafe { steerkit_checkpoint_load(missing.as_ptr(), &mut h) }, SteerkitStatus::Io);
    assert!(last_error().contains("absent.ckpt"));
    assert!(h.is_null());

    let junk = f.path.with_file_name("junk.ckpt");
    std::fs::write(&junk, b"NOTSTEER").unwrap();
    assert_eq!(unsafe { steerkit_checkpoint_load(cpath(&junk).as_ptr(), &mut h) }, SteerkitStatus::Format);
    assert_eq!(unsafe { steerkit_checkpoint_load(ptr::null(), &mut h) }, SteerkitStatus::NullPointer);
    assert_eq!(last_error(), "path is null");
    unsafe { steerkit_checkpoint_free(ptr::null_mut()) };
}

#[test]
fn embed_matches_library() {
    let f = fixture();
    let h = load();
    let (mut d, mut size) = (0usize, 0usize);
    assert_eq!(unsafe { steerkit_checkpoint_dims(h.0, &mut d, &mut size) }, SteerkitStatus::Ok);
    assert_eq!((d, size), (f.ck.model.embed_dim(), f.ck.model.config.image_size));

    let eval = f.ck.config.dataset.load().unwrap().eval;
    let imgs: Vec<_> = eval.iter().take(3).map(|li| &li.image).collect();
    let pixels: Vec<f32> = imgs.iter().flat_map(|i| i.pixels.iter().copied()).collect();
    let mut out = vec![0f32; 3 * d];
    let s = unsafe { steerkit_embed(h.0, pixels.as_ptr(), 3, size, out.as_mut_ptr(), out.len()) };
    assert_eq!(s, SteerkitStatus::Ok);
    let want = embed_images(&f.ck.model, &f.ck.standardizer, &imgs).unwrap();
    assert_eq!(out, want.data());

    let s = unsafe { steerkit_embed(h.0, pixels.as_ptr(), 3, size, out.as_mut_ptr(), d) };
    assert_eq!(s, SteerkitStatus::ShapeMismatch);
    let s = unsafe { steerkit_embed(h.0, pixels.as_ptr(), 1, size - 1, out.as_mut_ptr(), d) };
    assert_eq!(s, SteerkitStatus::ShapeMismatch);
    let mut bad = pixels.clone();
    bad[0] = 2.0;
    let s = unsafe { steerkit_embed(h.0, bad.as_ptr(), 1, size, out.as_mut_ptr(), d) };
    assert_eq!(s, SteerkitStatus::InvalidArgument);
    assert!(last_error().contains("pixels"));
}

#[test]
fn steering_matches_library() {
    let f = fixture();
    let h = load();
    let d = f.ck.model.embed_dim();
    let e: Vec<f32> = (0..d).map(|i| (i as f32 * 0.37).sin()).collect();
    let theta = [0.4, -0.2, 0.1];
    let p = AugmentParams::new(AugmentKind::Photo, theta.to_vec()).unwrap();
    let m = f.ck.map(AugmentKind::Photo).unwrap();

    let mut wm = 0.0;
    assert_eq!(unsafe { steerkit_default_wm(h.0, &mut wm) }, SteerkitStatus::Ok);
    assert_eq!(wm, 5.0);
    let mut has = 0u8;
    assert_eq!(unsafe { steerkit_has_map(h.0, STEERKIT_KIND_PHOTO, &mut has) }, SteerkitStatus::Ok);
    assert_eq!(has, 1);

    let mut out = vec![0f32; d];
    let s = unsafe { steerkit_map_apply(h.0, STEERKIT_KIND_PHOTO, e.as_ptr(), d, theta.as_ptr(), 3, out.as_mut_ptr()) };
    assert_eq!(s, SteerkitStatus::Ok);
    assert_eq!(out, delta_steer(m, &e, &p, 0.0).unwrap());
    let s = unsafe { steerkit_delta_steer(h.0, STEERKIT_KIND_PHOTO, e.as_ptr(), d, theta.as_ptr(), 3, wm, out.as_mut_ptr()) };
    assert_eq!(s, SteerkitStatus::Ok);
    assert_eq!(out, delta_steer(m, &e, &p, 5.0).unwrap());

    let s = unsafe { steerkit_delta_steer(h.0, 9, e.as_ptr(), d, theta.as_ptr(), 3, 1.0, out.as_mut_ptr()) };
    assert_eq!(s, SteerkitStatus::InvalidArgument);
    assert!(last_error().contains("kind 9"));
    let big = [1.5, 0.0, 0.0];
    let s = unsafe { steerkit_map_apply(h.0, STEERKIT_KIND_PHOTO, e.as_ptr(), d, big.as_ptr(), 3, out.as_mut_ptr()) };
    assert_eq!(s, SteerkitStatus::InvalidArgument);
    let s = unsafe { steerkit_map_apply(h.0, STEERKIT_KIND_PHOTO, e.as_ptr(), d - 1, theta.as_ptr(), 3, out.as_mut_ptr()) };
    assert_eq!(s, SteerkitStatus::ShapeMismatch);
    let s = unsafe { steerkit_delta_steer(h.0, STEERKIT_KIND_PHOTO, e.as_ptr(), d, theta.as_ptr(), 3, f64::NAN, out.as_mut_ptr()) };
    assert_ne!(s, SteerkitStatus::Ok);
}

#[test]
fn augment_matches_library() {
    let img = &fixture().ck.config.dataset.load().unwrap().eval[0].image;
    let theta = [0.1, 0.15, 0.7, 0.8];
    let mut out = vec![0f32; img.pixels.len()];
    let s = unsafe { steerkit_augment(img.pixels.as_ptr(), img.height, STEERKIT_KIND_GEO, theta.as_ptr(), 4, out.as_mut_ptr()) };
    assert_eq!(s, SteerkitStatus::Ok);
    let want = augment::apply(img, &AugmentParams::new(AugmentKind::Geo, theta.to_vec()).unwrap()).unwrap();
    assert_eq!(out, want.pixels);
    let s = unsafe { steerkit_augment(img.pixels.as_ptr(), img.height, STEERKIT_KIND_GEO, theta.as_ptr(), 2, out.as_mut_ptr()) };
    assert_eq!(s, SteerkitStatus::InvalidArgument);
    let s = unsafe { steerkit_augment(img.pixels.as_ptr(), img.height, STEERKIT_KIND_GEO, theta.as_ptr(), 4, ptr::null_mut()) };
    assert_eq!(s, SteerkitStatus::NullPointer);
}

#[test]
fn errors_are_thread_local() {
    let mut h = ptr::null_mut();
    assert_eq!(unsafe { steerkit_checkpoint_load(ptr::null(), &mut h) }, SteerkitStatus::NullPointer);
    let other = std::thread::spawn(|| steerkit_last_error().is_null()).join().unwrap();
    assert!(other);
    assert!(!steerkit_last_error().is_null());
    let v = unsafe { CStr::from_ptr(steerkit_version()) }.to_str().unwrap();
    assert_eq!(v, env!("CARGO_PKG_VERSION"));
}

fn target_dir() -> PathBuf {
    let exe = std::env::current_exe().unwrap();
    exe.parent().and_then(Path::parent).unwrap().to_path_buf()
}

/// Compiles a C client against the generated header and the static library.
#[test]
fn c_client_links_and_runs() {
    let lib = target_dir().join("libsteerkit_ffi.a");
    assert!(lib.exists(), "static library missing at {}", lib.display());
    let work = tempfile::tempdir().unwrap();
    let exe = work.path().join("client");
    let include = Path::new(env!("CARGO_MANIFEST_DIR")).join("include");
    let out = Command::new("cc")
        .args(["-std=c99", "-Wall", "-Werror", "-o"])
        .arg(&exe)
        .arg(Path::new(env!("CARGO_MANIFEST_DIR")).join("tests/client.c"))
        .arg("-I")
        .arg(&include)
        .arg(&lib)
        .args(["-lpthread", "-ldl", "-lm"])
        .output()
        .expect("cc runs");
    assert!(out.status.success(), "{}", String::from_utf8_lossy(&out.stderr));
    let run = Command::new(&exe).arg(&fixture().path).output().unwrap();
    let stdout = String::from_utf8_lossy(&run.stdout);
    assert!(run.status.success(), "{stdout}{}", String::from_utf8_lossy(&run.stderr));
    assert!(stdout.contains("dim 64"), "{stdout}");
    assert!(stdout.contains("missing: status 5"), "{stdout}");
}
