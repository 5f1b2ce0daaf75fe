/** three.js rendering: orbitable point cloud plus gripper overlays. */

import * as THREE from 'three';
import { OrbitControls } from 'three/examples/jsm/controls/OrbitControls.js';

import { scoreColor, wireframeSegments } from './gripper.js';
import type { GraspRecord, ScenePayload } from './types.js';

export class SceneView {
  private readonly renderer: THREE.WebGLRenderer;
  private readonly scene = new THREE.Scene();
  private readonly camera: THREE.PerspectiveCamera;
  private readonly controls: OrbitControls;
  private cloud: THREE.Points | null = null;
  private overlay: THREE.LineSegments | null = null;

  constructor(private readonly canvas: HTMLCanvasElement) {
    this.renderer = new THREE.WebGLRenderer({ canvas, antialias: true });
    this.camera = new THREE.PerspectiveCamera(50, 1, 0.01, 20);
    // camera frame: +z into the scene; start slightly above, looking down-range
    this.camera.position.set(0, -0.25, -0.35);
    this.camera.up.set(0, -1, 0);
    this.controls = new OrbitControls(this.camera, canvas);
    this.controls.target.set(0, 0, 0.6);
    this.controls.enableDamping = true;
    this.scene.background = new THREE.Color(0x10141a);
    this.resize();
    this.animate();
  }

  resize(): void {
    const w = this.canvas.clientWidth || 800;
    const h = this.canvas.clientHeight || 600;
    this.renderer.setSize(w, h, false);
    this.camera.aspect = w / h;
    this.camera.updateProjectionMatrix();
  }

  setCloud(payload: ScenePayload): void {
    if (this.cloud) {
      this.scene.remove(this.cloud);
      this.cloud.geometry.dispose();
    }
    const geometry = new THREE.BufferGeometry();
    geometry.setAttribute('position', new THREE.BufferAttribute(payload.positions, 3));

    // shade by depth so the table and objects separate visually
    const colors = new Float32Array(payload.count * 3);
    let zMin = Infinity;
    let zMax = -Infinity;
    for (let i = 0; i < payload.count; i++) {
      const z = payload.positions[3 * i + 2];
      if (z < zMin) zMin = z;
      if (z > zMax) zMax = z;
    }
    const span = Math.max(zMax - zMin, 1e-6);
    for (let i = 0; i < payload.count; i++) {
      const u = 1 - (payload.positions[3 * i + 2] - zMin) / span;
      colors[3 * i] = 0.35 + 0.5 * u;
      colors[3 * i + 1] = 0.4 + 0.45 * u;
      colors[3 * i + 2] = 0.5 + 0.3 * u;
    }
    geometry.setAttribute('color', new THREE.BufferAttribute(colors, 3));
    const material = new THREE.PointsMaterial({ size: 0.002, vertexColors: true });
    this.cloud = new THREE.Points(geometry, material);
    this.scene.add(this.cloud);

    const center = geometry.boundingSphere ?? null;
    geometry.computeBoundingSphere();
    if (geometry.boundingSphere && !center) {
      this.controls.target.copy(geometry.boundingSphere.center);
    }
  }

  setGrasps(grasps: GraspRecord[]): void {
    if (this.overlay) {
      this.scene.remove(this.overlay);
      this.overlay.geometry.dispose();
    }
    const positions: number[] = [];
    const colors: number[] = [];
    grasps.forEach((grasp, rank) => {
      const rgb = rank === 0 ? ([1, 1, 1] as const) : scoreColor(grasp.score);
      for (const [a, b] of wireframeSegments(grasp)) {
        positions.push(...a, ...b);
        colors.push(...rgb, ...rgb);
      }
    });
    const geometry = new THREE.BufferGeometry();
    geometry.setAttribute('position', new THREE.Float32BufferAttribute(positions, 3));
    geometry.setAttribute('color', new THREE.Float32BufferAttribute(colors, 3));
    this.overlay = new THREE.LineSegments(
      geometry,
      new THREE.LineBasicMaterial({ vertexColors: true }),
    );
    this.scene.add(this.overlay);
  }

  private animate = (): void => {
    requestAnimationFrame(this.animate);
    this.controls.update();
    this.renderer.render(this.scene, this.camera);
  };
}
