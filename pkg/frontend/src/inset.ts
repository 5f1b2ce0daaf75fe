/** 2D depth-image inset with exact pixel semantics for click/box guidance.
 *
 * Clicks map canvas coordinates back to source-image pixels (u, v); a drag
 * larger than a few pixels becomes a bbox. The service contract is
 * pixel-based, so all picking happens here rather than in the 3D view.
 */

export type PickHandler = (pick:
  | { kind: 'click'; pixel: [number, number] }
  | { kind: 'bbox'; bbox: [number, number, number, number] }) => void;

const DRAG_THRESHOLD_PX = 4;

export class ImageInset {
  private imageWidth = 0;
  private imageHeight = 0;
  private dragStart: [number, number] | null = null;
  private marker: [number, number] | null = null;
  private box: [number, number, number, number] | null = null;
  private bitmap: HTMLImageElement | null = null;

  constructor(
    private readonly canvas: HTMLCanvasElement,
    private readonly onPick: PickHandler,
  ) {
    canvas.addEventListener('pointerdown', (e) => {
      this.dragStart = this.toPixel(e);
    });
    canvas.addEventListener('pointerup', (e) => {
      if (!this.dragStart) return;
      const start = this.dragStart;
      const end = this.toPixel(e);
      this.dragStart = null;
      if (!start || !end) return;
      const du = Math.abs(end[0] - start[0]);
      const dv = Math.abs(end[1] - start[1]);
      if (du > DRAG_THRESHOLD_PX || dv > DRAG_THRESHOLD_PX) {
        const bbox: [number, number, number, number] = [
          Math.min(start[0], end[0]), Math.min(start[1], end[1]),
          Math.max(start[0], end[0]), Math.max(start[1], end[1]),
        ];
        this.box = bbox;
        this.marker = null;
        this.onPick({ kind: 'bbox', bbox });
      } else {
        this.marker = end;
        this.box = null;
        this.onPick({ kind: 'click', pixel: end });
      }
      this.draw();
    });
  }

  async load(url: string): Promise<void> {
    const image = new Image();
    image.src = url;
    await image.decode();
    this.bitmap = image;
    this.imageWidth = image.naturalWidth;
    this.imageHeight = image.naturalHeight;
    this.canvas.width = this.imageWidth;
    this.canvas.height = this.imageHeight;
    this.marker = null;
    this.box = null;
    this.draw();
  }

  private toPixel(e: PointerEvent): [number, number] | null {
    if (!this.imageWidth) return null;
    const rect = this.canvas.getBoundingClientRect();
    const u = Math.floor(((e.clientX - rect.left) / rect.width) * this.imageWidth);
    const v = Math.floor(((e.clientY - rect.top) / rect.height) * this.imageHeight);
    if (u < 0 || v < 0 || u >= this.imageWidth || v >= this.imageHeight) return null;
    return [u, v];
  }

  private draw(): void {
    const ctx = this.canvas.getContext('2d');
    if (!ctx || !this.bitmap) return;
    ctx.drawImage(this.bitmap, 0, 0);
    ctx.strokeStyle = '#ff5050';
    ctx.lineWidth = 1.5;
    if (this.marker) {
      const [u, v] = this.marker;
      ctx.beginPath();
      ctx.arc(u, v, 5, 0, 2 * Math.PI);
      ctx.stroke();
    }
    if (this.box) {
      const [u0, v0, u1, v1] = this.box;
      ctx.strokeRect(u0, v0, u1 - u0, v1 - v0);
    }
  }
}
