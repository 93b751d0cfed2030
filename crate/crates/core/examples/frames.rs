//! Rigid frames: composition, inversion, rotation vectors and the frames
//! built from atoms.

use std::f64::consts::FRAC_PI_2;

use blockfold::frame::{gram_schmidt_frame, principal_frame, rotvec_to_frame};
use blockfold::{Frame, Quaternion, RotationVector};
use nalgebra::Vector3;

fn main() -> blockfold::Result<()> {
    let quarter = rotvec_to_frame(&RotationVector(Vector3::new(0.0, 0.0, FRAC_PI_2)), Vector3::new(1.0, 0.0, 0.0));
    let x = Vector3::new(1.0, 0.0, 0.0);
    println!("quarter turn about z, shifted by +x: {x:?} -> {:?}", quarter.apply(&x));

    let twice = quarter.compose(&quarter);
    println!("composed twice: {:?}", twice.apply(&x));
    let roundtrip = quarter.inverse().compose(&quarter);
    println!("inverse * frame = identity, error {:.1e}", (roundtrip.rotation - Frame::identity().rotation).amax());

    let r = RotationVector(Vector3::new(0.3, -1.2, 0.7));
    let q = Quaternion::from_rotvec(&r);
    let back = Quaternion::from_rotation(&q.to_rotation()).to_rotvec();
    println!("rotation vector {:?} -> quaternion norm {:.15} -> back {:?}", r.0, q.norm(), back.0);

    // backbone-style frame: origin on CA, first axis towards C, N in the plane
    let (n, ca, c) = (Vector3::new(-0.5, 1.4, 0.0), Vector3::zeros(), Vector3::new(1.5, 0.0, 0.0));
    let f = gram_schmidt_frame(ca, c - ca, n - ca)?;
    println!("Gram-Schmidt frame, N in local coordinates: {:?}", f.to_local(&n));

    let cloud: Vec<_> = (0..20)
        .map(|i| {
            let t = i as f64 * 0.37;
            Vector3::new(4.0 * t.sin(), 1.5 * (2.0 * t).cos(), 0.5 * t.cos() + 0.1 * t)
        })
        .collect();
    let p = principal_frame(&cloud)?;
    println!("principal frame centroid {:?}, orthogonality error {:.1e}", p.translation, p.orthogonality_error());
    Ok(())
}
