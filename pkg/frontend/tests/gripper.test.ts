import { describe, expect, it } from 'vitest';

import { eulerToRotation, scoreColor, wireframeSegments } from '../src/gripper.js';
import type { GraspRecord } from '../src/types.js';

function grasp(overrides: Partial<GraspRecord> = {}): GraspRecord {
  return {
    t: [0.1, -0.05, 0.6],
    euler: [0, 0, 0],
    width: 0.06,
    score: 0.8,
    region_index: 0,
    combo: [0, 0, 0],
    source_pixel: null,
    ...overrides,
  };
}

describe('eulerToRotation', () => {
  it('is the identity at zero angles', () => {
    const r = eulerToRotation(0, 0, 0);
    for (let i = 0; i < 3; i++) {
      for (let j = 0; j < 3; j++) {
        expect(r[i][j]).toBeCloseTo(i === j ? 1 : 0, 15);
      }
    }
  });

  it('column 0 is the closing axis (cos t cos b, sin t cos b, -sin b)', () => {
    const [theta, gamma, beta] = [0.5, -0.3, 0.2];
    const r = eulerToRotation(theta, gamma, beta);
    expect(r[0][0]).toBeCloseTo(Math.cos(theta) * Math.cos(beta), 12);
    expect(r[1][0]).toBeCloseTo(Math.sin(theta) * Math.cos(beta), 12);
    expect(r[2][0]).toBeCloseTo(-Math.sin(beta), 12);
  });

  it('columns are orthonormal', () => {
    const r = eulerToRotation(0.7, 0.4, -0.9);
    for (let i = 0; i < 3; i++) {
      for (let j = 0; j < 3; j++) {
        const dot = r[0][i] * r[0][j] + r[1][i] * r[1][j] + r[2][i] * r[2][j];
        expect(dot).toBeCloseTo(i === j ? 1 : 0, 12);
      }
    }
  });
});

describe('wireframeSegments', () => {
  it('places the palm bar across the opening at the pose translation', () => {
    const segments = wireframeSegments(grasp());
    const [left, right] = segments[0];
    expect(left).toEqual([0.1 - 0.03, -0.05, 0.6]);
    expect(right).toEqual([0.1 + 0.03, -0.05, 0.6]);
  });

  it('fingers extend along the approach axis (+z at zero pose)', () => {
    const segments = wireframeSegments(grasp());
    const [palmLeft, fingerTip] = segments[1];
    expect(fingerTip[0]).toBeCloseTo(palmLeft[0], 12);
    expect(fingerTip[1]).toBeCloseTo(palmLeft[1], 12);
    expect(fingerTip[2]).toBeGreaterThan(palmLeft[2]);
  });

  it('uses pose fields verbatim: identical input gives identical output', () => {
    const g = grasp({ euler: [0.3, -0.2, 0.5], width: 0.042 });
    expect(wireframeSegments(g)).toEqual(wireframeSegments(grasp({
      euler: [0.3, -0.2, 0.5], width: 0.042,
    })));
  });

  it('palm width equals the grasp width for any orientation', () => {
    const g = grasp({ euler: [0.9, 0.6, -0.7], width: 0.08 });
    const [left, right] = wireframeSegments(g)[0];
    const d = Math.hypot(right[0] - left[0], right[1] - left[1], right[2] - left[2]);
    expect(d).toBeCloseTo(0.08, 12);
  });
});

describe('scoreColor', () => {
  it('is monotone in the red channel and clamps out-of-range scores', () => {
    const reds = [0, 0.25, 0.5, 0.75, 1].map((s) => scoreColor(s)[0]);
    for (let i = 1; i < reds.length; i++) expect(reds[i]).toBeGreaterThan(reds[i - 1]);
    expect(scoreColor(-1)).toEqual(scoreColor(0));
    expect(scoreColor(2)).toEqual(scoreColor(1));
  });
});
