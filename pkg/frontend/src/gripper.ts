/** Two-finger gripper wireframes from grasp poses.
 *
 * Convention note (shared with the backend as documentation, not code):
 * R = Rz(theta) * Ry(beta) * Rx(gamma); column 0 of R is the jaw closing
 * axis, column 2 the approach axis. The viewer does no grasp math beyond
 * placing line segments at the pose it was given — every number comes
 * verbatim from the response.
 */

import type { GraspRecord } from './types.js';

export type Vec3 = [number, number, number];

const FINGER_LENGTH = 0.04;
const STEM_LENGTH = 0.02;

export function eulerToRotation(theta: number, gamma: number, beta: number): number[][] {
  const [ct, st] = [Math.cos(theta), Math.sin(theta)];
  const [cb, sb] = [Math.cos(beta), Math.sin(beta)];
  const [cg, sg] = [Math.cos(gamma), Math.sin(gamma)];
  // Rz(theta) * Ry(beta) * Rx(gamma), rows x columns
  return [
    [ct * cb, ct * sb * sg - st * cg, ct * sb * cg + st * sg],
    [st * cb, st * sb * sg + ct * cg, st * sb * cg - ct * sg],
    [-sb, cb * sg, cb * cg],
  ];
}

function column(r: number[][], j: number): Vec3 {
  return [r[0][j], r[1][j], r[2][j]];
}

function add(a: Vec3, b: Vec3, scale = 1): Vec3 {
  return [a[0] + scale * b[0], a[1] + scale * b[1], a[2] + scale * b[2]];
}

/** Line segments (pairs of endpoints) for one gripper glyph: a palm bar
 *  across the opening, two fingers along the approach axis, and a stem. */
export function wireframeSegments(grasp: GraspRecord): Array<[Vec3, Vec3]> {
  const [theta, gamma, beta] = grasp.euler;
  const r = eulerToRotation(theta, gamma, beta);
  const closing = column(r, 0);
  const approach = column(r, 2);
  const t = grasp.t;
  const half = grasp.width / 2;

  const palmLeft = add(t, closing, -half);
  const palmRight = add(t, closing, half);
  return [
    [palmLeft, palmRight],
    [palmLeft, add(palmLeft, approach, FINGER_LENGTH)],
    [palmRight, add(palmRight, approach, FINGER_LENGTH)],
    [t, add(t, approach, -STEM_LENGTH)],
  ];
}

/** Score in [0, 1] -> RGB in [0, 1]: cold blue for poor grasps warming to
 *  red for confident ones; monotone in the red channel. */
export function scoreColor(score: number): Vec3 {
  const s = Math.min(1, Math.max(0, score));
  return [s, 0.25 + 0.35 * (1 - Math.abs(2 * s - 1)), 1 - s];
}
