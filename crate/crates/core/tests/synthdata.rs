use asda_core::dataset::Split;
use asda_core::synthdata::*;
use asda_core::{BBox, ClassCatalog, DomainTag};
use proptest::prelude::*;

/// Naive labelling: repeatedly relax component ids to the minimum neighbour id.
fn oracle_boxes(labels: &[u8], h: usize, w: usize, min_area: usize) -> Vec<(usize, [usize; 4])> {
    let mut id: Vec<usize> = (0..labels.len()).collect();
    loop {
        let mut changed = false;
        for p in 0..labels.len() {
            let (y, x) = (p / w, p % w);
            let mut nb = Vec::new();
            if x > 0 {
                nb.push(p - 1);
            }
            if x + 1 < w {
                nb.push(p + 1);
            }
            if y > 0 {
                nb.push(p - w);
            }
            if y + 1 < h {
                nb.push(p + w);
            }
            for q in nb {
                if labels[q] == labels[p] && id[q] < id[p] {
                    id[p] = id[q];
                    changed = true;
                }
            }
        }
        if !changed {
            break;
        }
    }
    let mut roots: Vec<usize> = id.clone();
    roots.sort_unstable();
    roots.dedup();
    let mut out = Vec::new();
    for r in roots {
        let members: Vec<usize> = (0..labels.len()).filter(|&p| id[p] == r).collect();
        if members.len() < min_area {
            continue;
        }
        let xs = members.iter().map(|p| p % w);
        let ys = members.iter().map(|p| p / w);
        let b = [
            xs.clone().min().unwrap(),
            ys.clone().min().unwrap(),
            xs.max().unwrap() + 1,
            ys.max().unwrap() + 1,
        ];
        out.push((labels[r] as usize, b));
    }
    out
}

fn as_tuples(set: &asda_core::ObjectSet) -> Vec<(usize, [usize; 4])> {
    set.iter()
        .map(|o| {
            let b = o.bbox;
            (o.class, [b.x_min as usize, b.y_min as usize, b.x_max as usize, b.y_max as usize])
        })
        .collect()
}

fn grid() -> impl Strategy<Value = (usize, usize, Vec<u8>)> {
    (1usize..9, 1usize..9).prop_flat_map(|(h, w)| (Just(h), Just(w), prop::collection::vec(0u8..3, h * w)))
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(256))]

    #[test]
    fn components_match_the_naive_labelling((h, w, labels) in grid(), min_area in 1usize..5) {
        let got = boxes_from_mask(&labels, h, w, &ClassCatalog::urban(), min_area);
        prop_assert_eq!(as_tuples(&got), oracle_boxes(&labels, h, w, min_area));
    }

    #[test]
    fn unfiltered_boxes_cover_every_pixel_of_their_class((h, w, labels) in grid()) {
        let set = boxes_from_mask(&labels, h, w, &ClassCatalog::urban(), 1);
        let map = coarse_map_from_boxes(&set, h, w, 7);
        for (p, &c) in labels.iter().enumerate() {
            prop_assert!(map.get(c as usize, p / w, p % w));
        }
    }

    #[test]
    fn generated_labels_partition_the_image(id in 0u64..500, target in any::<bool>()) {
        let spec = SceneSpec::urban(64, 64);
        let (domain, style) = if target {
            (DomainTag::Target, DomainStyle::real_style())
        } else {
            (DomainTag::Source, DomainStyle::synth_style())
        };
        let (scene, placed) = generate_scene_with(&spec, &style, domain, id, GenerateOptions { attach_pixel_labels: Some(true) }).unwrap();
        let labels = scene.pixel_labels.as_ref().unwrap();
        prop_assert_eq!(labels.len(), 64 * 64);
        prop_assert!(labels.iter().all(|&c| (c as usize) < 7));
        prop_assert!(scene.image.iter().all(|v| v.is_finite() && (0.0..=1.0).contains(v)));
        for p in &placed {
            prop_assert!(p.visible_pixels >= DEFAULT_MIN_AREA);
        }
        let map = coarse_map_from_boxes(&scene.objects, 64, 64, 7);
        let covered = labels.iter().enumerate().filter(|&(p, &c)| map.get(c as usize, p / 64, p % 64)).count();
        prop_assert!(covered as f64 >= 0.99 * labels.len() as f64, "covered {}", covered);
        for o in &scene.objects {
            prop_assert!(o.bbox.within(64, 64));
        }
    }
}

#[test]
fn l_shape_is_one_component() {
    let (h, w) = (6, 6);
    let mut labels = vec![0u8; h * w];
    for y in 1..5 {
        labels[y * w + 1] = 3;
    }
    for x in 1..5 {
        labels[4 * w + x] = 3;
    }
    let set = boxes_from_mask(&labels, h, w, &ClassCatalog::urban(), 1);
    let cars: Vec<_> = set.iter().filter(|o| o.class == 3).collect();
    assert_eq!(cars.len(), 1);
    assert_eq!(cars[0].bbox, BBox::new(1.0, 1.0, 5.0, 5.0));
}

#[test]
fn separated_blocks_of_one_class_give_two_boxes() {
    let (h, w) = (4, 8);
    let mut labels = vec![0u8; h * w];
    for y in 0..2 {
        for x in [0, 1, 5, 6] {
            labels[y * w + x] = 4;
        }
    }
    let set = boxes_from_mask(&labels, h, w, &ClassCatalog::urban(), 1);
    let people: Vec<BBox> = set.iter().filter(|o| o.class == 4).map(|o| o.bbox).collect();
    assert_eq!(people, vec![BBox::new(0.0, 0.0, 2.0, 2.0), BBox::new(5.0, 0.0, 7.0, 2.0)]);
}

#[test]
fn diagonal_neighbours_are_not_connected() {
    let labels = [1u8, 0, 0, 1];
    let set = boxes_from_mask(&labels, 2, 2, &ClassCatalog::urban(), 1);
    assert_eq!(set.iter().filter(|o| o.class == 1).count(), 2);
}

fn request(seed: u64, domain: DomainTag) -> SplitRequest {
    SplitRequest {
        name: "t".into(),
        n_scenes: 5,
        spec: SceneSpec::urban(32, 32),
        style: match domain {
            DomainTag::Source => DomainStyle::synth_style(),
            DomainTag::Target => DomainStyle::real_style(),
        },
        domain,
        seed,
        attach_pixel_labels: None,
    }
}

#[test]
fn splits_are_reproducible_and_seed_dependent() {
    let root = tempfile::tempdir().unwrap();
    let cat = ClassCatalog::urban();
    let a = generate_split(&root.path().join("a"), &request(11, DomainTag::Source), &cat).unwrap();
    let b = generate_split(&root.path().join("b"), &request(11, DomainTag::Source), &cat).unwrap();
    let c = generate_split(&root.path().join("c"), &request(12, DomainTag::Source), &cat).unwrap();
    let hashes = |m: &asda_core::dataset::Manifest| m.scenes.iter().map(|e| e.sha256.clone()).collect::<Vec<_>>();
    assert_eq!(hashes(&a), hashes(&b));
    assert!(hashes(&a).iter().zip(hashes(&c)).all(|(x, y)| *x != y));
    assert!(a.pixel_labels);

    let loaded = Split::load(&root.path().join("a")).unwrap();
    assert_eq!(loaded.scenes.len(), 5);
    assert_eq!(loaded.catalog, cat);
}

#[test]
fn target_splits_carry_no_pixel_labels_unless_asked() {
    let root = tempfile::tempdir().unwrap();
    let cat = ClassCatalog::urban();
    let m = generate_split(root.path(), &request(1, DomainTag::Target), &cat).unwrap();
    assert!(!m.pixel_labels);
    let s = Split::load(root.path()).unwrap();
    assert!(s.scenes.iter().all(|s| s.pixel_labels.is_none() && !s.objects.is_empty()));

    let mut req = request(1, DomainTag::Target);
    req.attach_pixel_labels = Some(true);
    let dir = root.path().join("val");
    assert!(generate_split(&dir, &req, &cat).unwrap().pixel_labels);
}

#[test]
fn tampered_scene_files_fail_to_load() {
    let root = tempfile::tempdir().unwrap();
    let m = generate_split(root.path(), &request(2, DomainTag::Source), &ClassCatalog::urban()).unwrap();
    let path = root.path().join(&m.scenes[0].file);
    let mut bytes = std::fs::read(&path).unwrap();
    let last = bytes.len() - 1;
    bytes[last] ^= 1;
    std::fs::write(&path, bytes).unwrap();
    assert!(Split::load(root.path()).is_err());
}
