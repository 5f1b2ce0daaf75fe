/** Wire types mirroring the grasp service JSON, field for field. */

export interface GraspRecord {
  /** camera-frame translation [x, y, z] in meters */
  t: [number, number, number];
  /** [theta, gamma, beta] intrinsic rotations, each in [-pi/2, pi/2] */
  euler: [number, number, number];
  /** jaw opening in meters */
  width: number;
  /** confidence in [0, 1] */
  score: number;
  region_index: number;
  combo: [number, number, number];
  source_pixel: [number, number] | null;
}

export interface GraspResponse {
  scene_id: string;
  mode: string;
  k: number;
  radius: number;
  grasps: GraspRecord[];
}

export type GuidanceMode = 'click' | 'bbox' | 'grid';

export interface RequestParams {
  mode: GuidanceMode;
  k: number;
  radius: number;
  pixel?: [number, number];
  bbox?: [number, number, number, number];
}

export interface ScenePayload {
  count: number;
  /** xyz triplets, camera frame, meters */
  positions: Float32Array;
  imageWidth: number;
  imageHeight: number;
}
